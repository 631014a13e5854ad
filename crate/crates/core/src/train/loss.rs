//! Reconstruction and least-squares adversarial objectives.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Mean squared error over every element.
pub fn recon_loss<T: Scalar, G: Graph<T>>(g: &mut G, a: &G::Node, b: &G::Node) -> Result<G::Node> {
    let d = g.sub(a, b)?;
    let sq = g.square(&d)?;
    g.mean(&sq)
}

/// Mean over scales of `mean((m - target)^2)`.
fn ls_term<T: Scalar, G: Graph<T>>(g: &mut G, maps: &[G::Node], target: f64) -> Result<G::Node> {
    if maps.is_empty() {
        return Err(Error::invalid("adversarial loss", "no patch maps"));
    }
    let mut acc: Option<G::Node> = None;
    for m in maps {
        let d = g.add_scalar(m, -target)?;
        let sq = g.square(&d)?;
        let term = g.mean(&sq)?;
        acc = Some(match acc {
            Some(a) => g.add(&a, &term)?,
            None => term,
        });
    }
    g.scale(&acc.expect("non-empty"), 1.0 / maps.len() as f64)
}

/// Generator objective: fake patches pushed towards 1.
pub fn g_adv_loss<T: Scalar, G: Graph<T>>(g: &mut G, fake: &[G::Node]) -> Result<G::Node> {
    ls_term(g, fake, 1.0)
}

/// Discriminator objective: real patches towards 1 plus fake patches towards 0.
pub fn d_adv_loss<T: Scalar, G: Graph<T>>(g: &mut G, real: &[G::Node], fake: &[G::Node]) -> Result<G::Node> {
    let r = ls_term(g, real, 1.0)?;
    let f = ls_term(g, fake, 0.0)?;
    g.add(&r, &f)
}

/// Weights of the two generator terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub recon: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { recon: 10.0, adv: 1.0 }
    }
}

impl LossWeights {
    /// Parses `recon:adv`, e.g. `10:1`.
    pub fn parse_ratio(s: &str) -> Result<Self> {
        let bad = || Error::invalid("loss ratio", format!("expected `recon:adv` with non-negative numbers, got `{s}`"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let recon: f64 = a.trim().parse().map_err(|_| bad())?;
        let adv: f64 = b.trim().parse().map_err(|_| bad())?;
        if !(recon.is_finite() && adv.is_finite() && recon >= 0.0 && adv >= 0.0) || recon + adv == 0.0 {
            return Err(bad());
        }
        Ok(LossWeights { recon, adv })
    }
}

/// `recon_weight * recon + adv_weight * adv`.
pub fn total_g_loss<T: Scalar, G: Graph<T>>(g: &mut G, w: LossWeights, recon: &G::Node, adv: &G::Node) -> Result<G::Node> {
    let r = g.scale(recon, w.recon)?;
    let a = g.scale(adv, w.adv)?;
    g.add(&r, &a)
}

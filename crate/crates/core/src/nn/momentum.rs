use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::Tensor;

use super::{ModelConfig, Net};

/// Prefixes of the parameters mirrored by the momentum encoders.
pub const MOMENTUM_PREFIXES: [&str; 4] = ["visual.", "img_proj.", "text.", "txt_proj."];

/// EMA replicas of the visual and text encoders with their projections.
/// They never receive gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumCopies {
    pub params: ParamStore<f64>,
    pub momentum: f64,
}

impl MomentumCopies {
    pub fn from_live(live: &ParamStore<f64>, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1]")));
        }
        let mut params = ParamStore::new();
        for (name, t) in live.iter() {
            if MOMENTUM_PREFIXES.iter().any(|p| name.starts_with(p)) {
                params.insert(name, t.clone());
            }
        }
        Ok(Self { params, momentum })
    }

    /// `copy ← m·copy + (1 − m)·live` for every mirrored parameter.
    pub fn update(&mut self, live: &ParamStore<f64>) -> Result<()> {
        for (name, copy) in self.params.iter() {
            let src = live
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("live model lacks `{name}`")))?;
            if src.shape() != copy.shape() {
                return Err(Error::ShapeMismatch {
                    op: "momentum_update",
                    lhs: copy.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
        }
        let m = self.momentum;
        for (name, copy) in self.params.iter_mut() {
            let src = live.get(name)?;
            for (c, &s) in copy.data_mut().iter_mut().zip(src.data()) {
                *c = m * *c + (1.0 - m) * s;
            }
        }
        Ok(())
    }

    /// Unit-norm contrastive features `([B, C], [B, C])` from the momentum encoders.
    pub fn features(&self, cfg: &ModelConfig, images: &[&[f64]], texts: &[Vec<usize>]) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let bound = self.params.bind_constant(&tape);
        let net = Net::new(&tape, &bound, cfg);
        let (img_cls, _) = net.encode_image(images)?;
        let img = net.image_features(img_cls)?;
        let txt = net.encode_text(texts)?;
        let txt = net.text_features(txt.cls)?;
        Ok((tape.value(img), tape.value(txt)))
    }
}

//! The trainable weight vector: opening weights, per-block per-step residual
//! layer weights, connecting layer weights, and the classifier.
//!
//! Every parameter lives in exactly one contiguous group, and
//! [`NetWeights::slices`] / [`NetWeights::slices_mut`] enumerate the groups in
//! one canonical order shared by weights, gradients, and optimizer state.
//! Gradients reuse the same structure ([`Gradients`] is an alias).

use crate::conv::ConvBlock;
use crate::dynamics::{DynamicsSpec, Family};
use crate::error::{Error, Result};
use crate::layers::{
    ClassifierWeights, ConnectorWeights, NormWeights, OpeningWeights, StepNorm, SymLayerWeights,
};
use crate::rng::Rng;

/// Weights of one time step: one symmetric layer for the parabolic and
/// second-order families, a pair for the Hamiltonian family (the first acts
/// on Z in the Y-update, the second on Y in the Z-update).
#[derive(Debug, Clone, PartialEq)]
pub enum StepWeights {
    Single(SymLayerWeights),
    Pair {
        first: SymLayerWeights,
        second: SymLayerWeights,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub steps: Vec<StepWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetWeights {
    pub opening: OpeningWeights,
    pub blocks: Vec<BlockWeights>,
    /// One connector per block; the last one feeds the classifier.
    pub connectors: Vec<ConnectorWeights>,
    pub classifier: ClassifierWeights,
}

/// Gradients mirror the weight structure exactly.
pub type Gradients = NetWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    OpeningConv,
    OpeningNorm,
    /// Convolution stencils inside ResNet blocks; these are the entries the
    /// box constraint projects onto [-1, 1].
    BlockStencil,
    BlockNorm,
    ConnectorConv,
    ConnectorNorm,
    ClassifierWeight,
    ClassifierBias,
}

#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub kind: ParamKind,
    pub len: usize,
}

fn step_norm_weights(norm: StepNorm, channels: usize) -> Option<NormWeights> {
    match norm {
        StepNorm::None => None,
        StepNorm::Tv { .. } => Some(NormWeights::identity(channels)),
    }
}

impl NetWeights {
    /// Fresh weights for an architecture: stencils i.i.d. normal with std
    /// 1/sqrt(fan_in * k^2), norm scales 1 and biases 0, classifier zeros.
    /// Keeps the initial dynamics near the identity map.
    pub fn init(spec: &DynamicsSpec, rng: &mut Rng) -> Result<NetWeights> {
        spec.validate()?;
        let opening = OpeningWeights {
            conv: ConvBlock::init_random(spec.in_channels, spec.widths[0], 3, rng)?,
            norm: NormWeights::identity(spec.widths[0]),
        };
        let mut blocks = Vec::with_capacity(spec.widths.len());
        for &width in &spec.widths {
            let mut steps = Vec::with_capacity(spec.steps_per_block);
            for _ in 0..spec.steps_per_block {
                let step = match spec.family {
                    Family::Parabolic | Family::SecondOrder => StepWeights::Single(SymLayerWeights {
                        conv: ConvBlock::init_random(width, width, 3, rng)?,
                        norm: step_norm_weights(spec.step_norm, width),
                    }),
                    Family::Hamiltonian => {
                        let half = width / 2;
                        StepWeights::Pair {
                            first: SymLayerWeights {
                                conv: ConvBlock::init_random(half, half, 3, rng)?,
                                norm: step_norm_weights(spec.step_norm, half),
                            },
                            second: SymLayerWeights {
                                conv: ConvBlock::init_random(half, half, 3, rng)?,
                                norm: step_norm_weights(spec.step_norm, half),
                            },
                        }
                    }
                };
                steps.push(step);
            }
            blocks.push(BlockWeights { steps });
        }
        let mut connectors = Vec::with_capacity(spec.widths.len());
        for i in 0..spec.widths.len() {
            let from = spec.widths[i];
            let to = spec.connector_output_width(i);
            connectors.push(ConnectorWeights {
                conv: ConvBlock::init_random(from, to, 1, rng)?,
                norm: NormWeights::identity(to),
            });
        }
        let classifier = ClassifierWeights::zeros(spec.num_classes, spec.final_width);
        Ok(NetWeights {
            opening,
            blocks,
            connectors,
            classifier,
        })
    }

    /// Parameter groups in canonical order, parallel to [`NetWeights::slices`].
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut groups = Vec::new();
        let mut push = |name: String, kind: ParamKind, len: usize| {
            groups.push(ParamGroup { name, kind, len })
        };
        push(
            "opening.conv".into(),
            ParamKind::OpeningConv,
            self.opening.conv.weights().len(),
        );
        push(
            "opening.scale".into(),
            ParamKind::OpeningNorm,
            self.opening.norm.scale.len(),
        );
        push(
            "opening.bias".into(),
            ParamKind::OpeningNorm,
            self.opening.norm.bias.len(),
        );
        for (bi, block) in self.blocks.iter().enumerate() {
            for (si, step) in block.steps.iter().enumerate() {
                let mut layer = |tag: &str, w: &SymLayerWeights| {
                    push(
                        format!("block{bi}.step{si}{tag}.conv"),
                        ParamKind::BlockStencil,
                        w.conv.weights().len(),
                    );
                    if let Some(n) = &w.norm {
                        push(
                            format!("block{bi}.step{si}{tag}.scale"),
                            ParamKind::BlockNorm,
                            n.scale.len(),
                        );
                        push(
                            format!("block{bi}.step{si}{tag}.bias"),
                            ParamKind::BlockNorm,
                            n.bias.len(),
                        );
                    }
                };
                match step {
                    StepWeights::Single(w) => layer("", w),
                    StepWeights::Pair { first, second } => {
                        layer(".first", first);
                        layer(".second", second);
                    }
                }
            }
        }
        for (ci, conn) in self.connectors.iter().enumerate() {
            push(
                format!("connector{ci}.conv"),
                ParamKind::ConnectorConv,
                conn.conv.weights().len(),
            );
            push(
                format!("connector{ci}.scale"),
                ParamKind::ConnectorNorm,
                conn.norm.scale.len(),
            );
            push(
                format!("connector{ci}.bias"),
                ParamKind::ConnectorNorm,
                conn.norm.bias.len(),
            );
        }
        push(
            "classifier.weight".into(),
            ParamKind::ClassifierWeight,
            self.classifier.weight.len(),
        );
        push(
            "classifier.bias".into(),
            ParamKind::ClassifierBias,
            self.classifier.bias.len(),
        );
        groups
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        fn layer<'a>(w: &'a SymLayerWeights, v: &mut Vec<&'a [f64]>) {
            v.push(w.conv.weights());
            if let Some(n) = &w.norm {
                v.push(&n.scale);
                v.push(&n.bias);
            }
        }
        let mut v: Vec<&[f64]> = Vec::new();
        v.push(self.opening.conv.weights());
        v.push(&self.opening.norm.scale);
        v.push(&self.opening.norm.bias);
        for block in &self.blocks {
            for step in &block.steps {
                match step {
                    StepWeights::Single(w) => layer(w, &mut v),
                    StepWeights::Pair { first, second } => {
                        layer(first, &mut v);
                        layer(second, &mut v);
                    }
                }
            }
        }
        for conn in &self.connectors {
            v.push(conn.conv.weights());
            v.push(&conn.norm.scale);
            v.push(&conn.norm.bias);
        }
        v.push(&self.classifier.weight);
        v.push(&self.classifier.bias);
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        fn layer<'a>(w: &'a mut SymLayerWeights, v: &mut Vec<&'a mut [f64]>) {
            v.push(w.conv.weights_mut());
            if let Some(n) = w.norm.as_mut() {
                v.push(&mut n.scale);
                v.push(&mut n.bias);
            }
        }
        let NetWeights {
            opening,
            blocks,
            connectors,
            classifier,
        } = self;
        let mut v: Vec<&mut [f64]> = Vec::new();
        v.push(opening.conv.weights_mut());
        v.push(&mut opening.norm.scale);
        v.push(&mut opening.norm.bias);
        for block in blocks {
            for step in &mut block.steps {
                match step {
                    StepWeights::Single(w) => layer(w, &mut v),
                    StepWeights::Pair { first, second } => {
                        layer(first, &mut v);
                        layer(second, &mut v);
                    }
                }
            }
        }
        for conn in connectors {
            v.push(conn.conv.weights_mut());
            v.push(&mut conn.norm.scale);
            v.push(&mut conn.norm.bias);
        }
        v.push(&mut classifier.weight);
        v.push(&mut classifier.bias);
        v
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn zeros_like(&self) -> NetWeights {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(0.0);
        }
        z
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for s in self.slices() {
            flat.extend_from_slice(s);
        }
        flat
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "flat vector has {} entries, weights have {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    /// self += alpha * other; the structures must match.
    pub fn axpy(&mut self, alpha: f64, other: &NetWeights) -> Result<()> {
        let others = other.slices();
        let mut mine = self.slices_mut();
        if mine.len() != others.len() {
            return Err(Error::invalid("weight structures do not match"));
        }
        for (m, o) in mine.iter_mut().zip(others) {
            if m.len() != o.len() {
                return Err(Error::invalid("weight group lengths do not match"));
            }
            for (a, b) in m.iter_mut().zip(o) {
                *a += alpha * b;
            }
        }
        Ok(())
    }

    pub fn scale_mut(&mut self, alpha: f64) {
        for s in self.slices_mut() {
            for v in s.iter_mut() {
                *v *= alpha;
            }
        }
    }

    /// Componentwise projection of the ResNet-block stencils onto [-1, 1].
    pub fn project_block_stencils(&mut self) {
        let groups = self.param_groups();
        for (slice, group) in self.slices_mut().into_iter().zip(groups) {
            if group.kind == ParamKind::BlockStencil {
                for v in slice.iter_mut() {
                    *v = v.clamp(-1.0, 1.0);
                }
            }
        }
    }

    /// Largest absolute difference across all parameters.
    pub fn max_abs_diff(&self, other: &NetWeights) -> f64 {
        let mut m: f64 = 0.0;
        for (a, b) in self.slices().iter().zip(other.slices()) {
            for (x, y) in a.iter().zip(b.iter()) {
                m = m.max((x - y).abs());
            }
        }
        m
    }
}

//! Adaptive graph convolution with squeeze-and-excitation, and the
//! per-articulator encoder built from it.

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Init, Param, ParamSet, Tape, Tensor, Var};

/// Output-channel multipliers relative to the encoder width, per layer.
pub const CHANNEL_SCHEDULE: [f64; 4] = [2.0, 1.0, 1.5, 2.0];

/// Widths after each AGCN layer for encoder width `c_in`.
pub fn channel_widths(c_in: usize) -> [usize; 4] {
    let mut c = c_in as f64;
    CHANNEL_SCHEDULE.map(|f| {
        c *= f;
        c.round() as usize
    })
}

#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SqueezeExcite {
    pub fn new(init: &mut Init, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        SqueezeExcite {
            fc1: Linear::new(init, &format!("{name}.fc1"), channels, hidden, true),
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, channels, true),
        }
    }

    /// Per-(sample, channel) gate in (0, 1) from `x: [L, F, J, C]`.
    pub fn gate(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (l, f, j, c) = (s[0], s[1], s[2], s[3]);
        let flat = tape.reshape(x, &[l, f * j, c])?;
        let squeeze = tape.mean_axis(flat, 1)?;
        let h = self.fc1.forward(tape, squeeze)?;
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, h)?;
        let g = tape.sigmoid(h);
        tape.reshape(g, &[l, 1, 1, c])
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = self.gate(tape, x)?;
        tape.mul(x, g)
    }

    pub fn collect(&self, set: &mut ParamSet) {
        self.fc1.collect(set);
        self.fc2.collect(set);
    }
}

#[derive(Clone, Debug)]
pub struct AgcnLayer {
    /// Fixed row-normalized skeleton adjacency.
    pub base_adjacency: Tensor,
    /// Learnable adjacency offset, zero at init.
    pub adaptive: Param,
    pub channel_map: Linear,
    /// Depthwise temporal kernel `[K, C_out]`.
    pub temporal: Param,
    pub se: Option<SqueezeExcite>,
}

impl AgcnLayer {
    pub fn new(
        init: &mut Init,
        name: &str,
        adjacency: Tensor,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        se_reduction: Option<usize>,
    ) -> Self {
        let j = adjacency.shape()[0];
        let bound = (3.0 / kernel as f64).sqrt();
        AgcnLayer {
            base_adjacency: adjacency,
            adaptive: Param::new(format!("{name}.adj_b"), Tensor::zeros(&[j, j])),
            channel_map: Linear::he(init, &format!("{name}.w"), c_in, c_out, true),
            temporal: Param::new(format!("{name}.tconv"), init.uniform(&[kernel, c_out], bound)),
            se: se_reduction.map(|r| SqueezeExcite::new(init, &format!("{name}.se"), c_out, r)),
        }
    }

    pub fn joints(&self) -> usize {
        self.base_adjacency.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.channel_map.out_dim()
    }

    /// `x: [..., F, J, C_in] -> [..., F, J, C_out]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() < 3 || s[s.len() - 2] != self.joints() {
            return Err(Error::shape("agcn", &s, self.base_adjacency.shape()));
        }
        let r = s.len();
        let (f, j, c) = (s[r - 3], s[r - 2], s[r - 1]);
        let lead: usize = s[..r - 3].iter().product();
        let x4 = tape.reshape(x, &[lead, f, j, c])?;

        // (A + B)·x per frame, via xᵀ·(A + B)ᵀ on [L, F, C, J]
        let a = tape.constant(self.base_adjacency.clone());
        let b = tape.param(&self.adaptive);
        let adj = tape.add(a, b)?;
        let adj_t = tape.transpose(adj)?;
        let xt = tape.permute(x4, &[0, 1, 3, 2])?;
        let mixed = tape.matmul(xt, adj_t)?;
        let mixed = tape.permute(mixed, &[0, 1, 3, 2])?;
        let y = self.channel_map.forward(tape, mixed)?;

        let co = self.c_out();
        let k = self.temporal.shape()[0];
        let flat = tape.reshape(y, &[lead, f, j * co])?;
        let w = tape.param(&self.temporal);
        let y = tape.depthwise_conv(flat, w, (k - 1) / 2, k / 2)?;
        let mut y = tape.reshape(y, &[lead, f, j, co])?;

        if let Some(se) = &self.se {
            y = se.forward(tape, y)?;
        }
        let mut y = tape.relu(y);
        if c == co {
            y = tape.add(y, x4)?;
        }
        let mut out_shape = s[..r - 1].to_vec();
        out_shape.push(co);
        tape.reshape(y, &out_shape)
    }

    pub fn collect(&self, set: &mut ParamSet) {
        set.push(&self.adaptive);
        self.channel_map.collect(set);
        set.push(&self.temporal);
        if let Some(se) = &self.se {
            se.collect(set);
        }
    }
}

/// `fc1 (3 -> C_in)`, four AGCN layers, then joints flattened into channels
/// and projected by `fc2 (J·6C_in -> C_out)`.
#[derive(Clone, Debug)]
pub struct ArticulatorEncoder {
    pub fc1: Linear,
    pub layers: Vec<AgcnLayer>,
    pub fc2: Linear,
}

impl ArticulatorEncoder {
    pub fn new(
        init: &mut Init,
        name: &str,
        adjacency: Tensor,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        se_reduction: Option<usize>,
    ) -> Self {
        let j = adjacency.shape()[0];
        let widths = channel_widths(c_in);
        let mut prev = c_in;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = AgcnLayer::new(
                    init,
                    &format!("{name}.agcn{}", i + 1),
                    adjacency.clone(),
                    prev,
                    w,
                    kernel,
                    se_reduction,
                );
                prev = w;
                l
            })
            .collect();
        ArticulatorEncoder {
            fc1: Linear::he(init, &format!("{name}.fc1"), 3, c_in, true),
            layers,
            fc2: Linear::new(init, &format!("{name}.fc2"), j * prev, c_out, true),
        }
    }

    /// `x: [..., F, J, 3] -> [..., F, C_out]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = self.fc1.forward(tape, x)?;
        for l in &self.layers {
            h = l.forward(tape, h)?;
        }
        let h = joint_flatten(tape, h)?;
        self.fc2.forward(tape, h)
    }

    pub fn collect(&self, set: &mut ParamSet) {
        self.fc1.collect(set);
        for l in &self.layers {
            l.collect(set);
        }
        self.fc2.collect(set);
    }
}

/// `[..., F, J, C] -> [..., F, J·C]`.
pub fn joint_flatten(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = s.len();
    let mut shape = s[..r - 2].to_vec();
    shape.push(s[r - 2] * s[r - 1]);
    tape.reshape(x, &shape)
}

//! Parameterized building blocks recorded onto a [`Tape`].

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::params::{he_normal, uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.register(
            format!("{name}.weight"),
            he_normal(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_side(&self, side: usize) -> usize {
        crate::tensor::conv_out_side(side, self.kernel, self.stride, self.pad)
    }

    pub fn macs(&self, in_side: usize) -> u64 {
        let o = self.out_side(in_side) as u64;
        o * o * (self.out_ch * self.in_ch * self.kernel * self.kernel) as u64
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.register(format!("{name}.weight"), he_normal(&[out_dim, in_dim], in_dim, rng));
        let bias = Some(store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Weights drawn from `U(-scale, scale)`.
    pub fn uniform(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        scale: f64,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), uniform(&[out_dim, in_dim], scale, rng));
        let bias = with_bias.then(|| store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }

    pub fn macs(&self) -> u64 {
        (self.in_dim * self.out_dim) as u64
    }
}

/// Two 3×3 convolutions with a rectified residual sum; a 1×1 projection
/// shortcut is used whenever the stride or the width changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, rng);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, rng);
        let shortcut = (stride != 1 || in_ch != out_ch)
            .then(|| Conv2d::new(store, &format!("{name}.shortcut"), in_ch, out_ch, 1, stride, 0, rng));
        Self {
            conv1,
            conv2,
            shortcut,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let y = self.conv1.forward(tape, store, x);
        let y = tape.relu(y);
        let y = self.conv2.forward(tape, store, y);
        let skip = match &self.shortcut {
            Some(s) => s.forward(tape, store, x),
            None => x,
        };
        let sum = tape.add(y, skip);
        tape.relu(sum)
    }

    pub fn out_side(&self, side: usize) -> usize {
        self.conv1.out_side(side)
    }

    pub fn macs(&self, in_side: usize) -> u64 {
        let out = self.out_side(in_side);
        self.conv1.macs(in_side) + self.conv2.macs(out) + self.shortcut.as_ref().map_or(0, |s| s.macs(in_side))
    }
}

/// A sequence of residual blocks; only the first may stride.
#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<ResidualBlock>,
}

impl Stage {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        blocks: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let blocks = (0..blocks)
            .map(|i| {
                let (cin, s) = if i == 0 { (in_ch, stride) } else { (out_ch, 1) };
                ResidualBlock::new(store, &format!("{name}.{i}"), cin, out_ch, s, rng)
            })
            .collect();
        Self { blocks }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Var {
        for b in &self.blocks {
            x = b.forward(tape, store, x);
        }
        x
    }

    pub fn out_side(&self, side: usize) -> usize {
        self.blocks.iter().fold(side, |s, b| b.out_side(s))
    }

    pub fn macs(&self, mut side: usize) -> u64 {
        let mut total = 0;
        for b in &self.blocks {
            total += b.macs(side);
            side = b.out_side(side);
        }
        total
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z = σ(W_z f + U_z h + b_z)
/// q = σ(W_q f + U_q h + b_q)
/// ĥ = tanh(W_h f + U_h (q ⊙ h) + b_h)
/// h' = z ⊙ h + (1 − z) ⊙ ĥ
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_z: Linear,
    pub u_z: Linear,
    pub w_q: Linear,
    pub u_q: Linear,
    pub w_h: Linear,
    pub u_h: Linear,
    pub dim: usize,
}

/// Intermediate values of one [`GruCell`] step.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub update: Var,
    pub reset: Var,
    pub candidate: Var,
    pub hidden: Var,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        let mut lin = |n: &str, i: usize, bias: bool| Linear::uniform(store, &format!("{name}.{n}"), i, dim, s, bias, rng);
        let w_z = lin("w_z", input_dim, true);
        let u_z = lin("u_z", dim, false);
        let w_q = lin("w_q", input_dim, true);
        let u_q = lin("u_q", dim, false);
        let w_h = lin("w_h", input_dim, true);
        let u_h = lin("u_h", dim, false);
        Self {
            w_z,
            u_z,
            w_q,
            u_q,
            w_h,
            u_h,
            dim,
        }
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, f: Var, h: Var) -> GruVars {
        let gate = |tape: &mut Tape, w: &Linear, u: &Linear, hin: Var| {
            let a = w.forward(tape, store, f);
            let b = u.forward(tape, store, hin);
            tape.add(a, b)
        };
        let z_pre = gate(tape, &self.w_z, &self.u_z, h);
        let update = tape.sigmoid(z_pre);
        let q_pre = gate(tape, &self.w_q, &self.u_q, h);
        let reset = tape.sigmoid(q_pre);
        let qh = tape.mul(reset, h);
        let c_pre = gate(tape, &self.w_h, &self.u_h, qh);
        let candidate = tape.tanh(c_pre);
        let keep = tape.mul(update, h);
        let one_minus_z = tape.affine(update, -1.0, 1.0);
        let fresh = tape.mul(one_minus_z, candidate);
        let hidden = tape.add(keep, fresh);
        GruVars {
            update,
            reset,
            candidate,
            hidden,
        }
    }

    pub fn macs(&self) -> u64 {
        self.w_z.macs() + self.u_z.macs() + self.w_q.macs() + self.u_q.macs() + self.w_h.macs() + self.u_h.macs()
    }
}

use rand::Rng;

use super::params::{Bound, ModelParams, ParamGroup, ParamId};
use super::tape::{Activation, Mat, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub act: Activation,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<R: Rng>(
        params: &mut ModelParams,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        let w = params.glorot(format!("{name}.w"), group, fan_out, fan_in, rng);
        let b = params.constant(format!("{name}.b"), group, 1, fan_out, 0.0);
        Self {
            w,
            b,
            act,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.dense(x, p.var(self.w), p.var(self.b), self.act)
    }
}

/// Stack of dense layers; the last one uses `out_act`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut ModelParams,
        name: &str,
        group: ParamGroup,
        widths: &[usize],
        hidden_act: Activation,
        out_act: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an mlp needs input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { out_act } else { hidden_act };
                Dense::new(
                    params,
                    &format!("{name}.{i}"),
                    group,
                    widths[i],
                    widths[i + 1],
                    act,
                    rng,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(tape, p, x)?;
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

/// GRU cell with reset gate applied after the recurrent projection.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_r: ParamId,
    pub b_r: ParamId,
    pub w_u: ParamId,
    pub b_u: ParamId,
    pub w_n: ParamId,
    pub u_n: ParamId,
    pub b_n: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(
        params: &mut ModelParams,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Gru;
        let w_r = params.glorot(format!("{name}.w_r"), g, hidden, input + hidden, rng);
        let b_r = params.constant(format!("{name}.b_r"), g, 1, hidden, 0.0);
        let w_u = params.glorot(format!("{name}.w_u"), g, hidden, input + hidden, rng);
        // +1 on the update gate favours keeping the previous state early on
        let b_u = params.constant(format!("{name}.b_u"), g, 1, hidden, 1.0);
        let w_n = params.glorot(format!("{name}.w_n"), g, hidden, input, rng);
        let u_n = params.glorot(format!("{name}.u_n"), g, hidden, hidden, rng);
        let b_n = params.constant(format!("{name}.b_n"), g, 1, hidden, 0.0);
        Self {
            w_r,
            b_r,
            w_u,
            b_u,
            w_n,
            u_n,
            b_n,
            input,
            hidden,
        }
    }

    /// `x`: batch × input, `h`: batch × hidden.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let (bx, ix) = tape.shape(x);
        let (bh, ih) = tape.shape(h);
        if ix != self.input || ih != self.hidden || bx != bh {
            return Err(Error::Dimension(format!(
                "gru expects x: _×{} and h: _×{}, got {bx}×{ix} and {bh}×{ih}",
                self.input, self.hidden
            )));
        }
        let xh = tape.concat_cols(&[x, h])?;
        let r_pre = tape.dense(xh, p.var(self.w_r), p.var(self.b_r), Activation::Linear)?;
        let r = tape.sigmoid(r_pre);
        let u_pre = tape.dense(xh, p.var(self.w_u), p.var(self.b_u), Activation::Linear)?;
        let u = tape.sigmoid(u_pre);
        let wx = tape.matmul_t(x, p.var(self.w_n))?;
        let uh = tape.matmul_t(h, p.var(self.u_n))?;
        let ruh = tape.mul(r, uh)?;
        let n_lin = tape.add(wx, ruh)?;
        let n_pre = tape.add_row(n_lin, p.var(self.b_n))?;
        let n = tape.tanh(n_pre);
        // (1-u)⊙n + u⊙h = n + u⊙(h-n)
        let diff = tape.sub(h, n)?;
        let gated = tape.mul(u, diff)?;
        tape.add(n, gated)
    }
}

/// Stable softmax of a single logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// KL(N(mu, sigma²) ‖ N(0, I)) summed over dimensions.
pub fn gaussian_kl(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::Dimension(format!(
            "kl: mu has {} entries, sigma {}",
            mu.len(),
            sigma.len()
        )));
    }
    if let Some(s) = sigma.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Domain(format!("sigma must be positive, got {s}")));
    }
    Ok(0.5
        * mu.iter()
            .zip(sigma)
            .map(|(&m, &s)| m * m + s * s - 1.0 - 2.0 * s.ln())
            .sum::<f64>())
}

/// Taped KL summed over every row and dimension.
pub fn gaussian_kl_var(tape: &mut Tape, mu: Var, sigma: Var) -> Result<Var> {
    let mu2 = tape.square(mu);
    let s2 = tape.square(sigma);
    let ls = tape.log(sigma)?;
    let inner = tape.lincomb(&[(0.5, mu2), (0.5, s2), (-1.0, ls)])?;
    let total = tape.sum(inner);
    let n = tape.value(mu).len() as f64;
    Ok(tape.add_scalar(total, -0.5 * n))
}

/// `z = mu + sigma ⊙ noise`.
pub fn reparam_sample(tape: &mut Tape, mu: Var, sigma: Var, noise: Mat) -> Result<Var> {
    let scaled = tape.mul_const(sigma, noise)?;
    tape.add(mu, scaled)
}

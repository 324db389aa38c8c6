//! Fully connected approximator u(x, t; theta): SiLU hidden layers, identity
//! output, Kaiming-uniform initialization, evaluable on plain values, on
//! jets, or recorded onto a reverse tape.

use crate::autodiff::{AutodiffError, Jet, NodeId, Tape};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid layer widths {0:?}: need [2, ..., 1] with positive entries")]
    BadWidths(Vec<usize>),
    #[error("input map half-widths must be positive and finite")]
    BadInputMap,
    #[error("parameter vector has length {got}, layout needs {need}")]
    BadLength { got: usize, need: usize },
    #[error("non-finite activation while evaluating layer {layer}")]
    NonFinite { layer: usize },
    #[error(transparent)]
    Tape(#[from] AutodiffError),
}

/// Affine change of input coordinates applied before the first layer:
/// x -> (x - x_center) / x_half and likewise for t. Derivatives produced by
/// every evaluation path remain with respect to the raw (x, t).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputMap {
    pub x_center: f64,
    pub x_half: f64,
    pub t_center: f64,
    pub t_half: f64,
}

impl Default for InputMap {
    fn default() -> InputMap {
        InputMap { x_center: 0.0, x_half: 1.0, t_center: 0.0, t_half: 1.0 }
    }
}

impl InputMap {
    /// Map sending the given ranges onto [-1, 1] x [-1, 1].
    pub fn for_domain(x_range: (f64, f64), t_range: (f64, f64)) -> InputMap {
        InputMap {
            x_center: 0.5 * (x_range.0 + x_range.1),
            x_half: 0.5 * (x_range.1 - x_range.0),
            t_center: 0.5 * (t_range.0 + t_range.1),
            t_half: 0.5 * (t_range.1 - t_range.0),
        }
    }

    fn valid(&self) -> bool {
        self.x_half > 0.0
            && self.t_half > 0.0
            && [self.x_center, self.x_half, self.t_center, self.t_half]
                .iter()
                .all(|v| v.is_finite())
    }
}

/// Architecture description: layer widths from the 2 inputs (x, t) down to
/// the single output u, plus the input coordinate map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub input_map: InputMap,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>) -> Result<MlpSpec, NetworkError> {
        let spec = MlpSpec { layer_widths, input_map: InputMap::default() };
        spec.validate()?;
        Ok(spec)
    }

    /// `depth` hidden layers of the given width between the fixed 2-input
    /// and 1-output layers.
    pub fn hidden(depth: usize, width: usize) -> MlpSpec {
        let mut w = Vec::with_capacity(depth + 2);
        w.push(2);
        w.extend(std::iter::repeat(width).take(depth));
        w.push(1);
        MlpSpec { layer_widths: w, input_map: InputMap::default() }
    }

    pub fn with_map(mut self, map: InputMap) -> MlpSpec {
        self.input_map = map;
        self
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let w = &self.layer_widths;
        if w.len() < 2 || w[0] != 2 || *w.last().unwrap() != 1 || w.iter().any(|&n| n == 0) {
            return Err(NetworkError::BadWidths(w.clone()));
        }
        if !self.input_map.valid() {
            return Err(NetworkError::BadInputMap);
        }
        Ok(())
    }
}

/// Offsets of one dense layer inside the flat parameter vector. Weights are
/// row-major out x in at `w_off`; biases follow at `b_off`.
#[derive(Clone, Copy, Debug)]
pub struct LayerBlock {
    pub w_off: usize,
    pub b_off: usize,
    pub n_in: usize,
    pub n_out: usize,
}

/// Layout of the flat parameter vector: per-layer weight and bias blocks in
/// order, then the three adaptive log-weights when attached.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub layers: Vec<LayerBlock>,
    /// Length of the network portion (weights and biases).
    pub n_net: usize,
    /// Offset of lambda_pde; lambda_ic and lambda_bc follow.
    pub lambda_off: Option<usize>,
    pub total: usize,
}

pub const N_ADAPTIVE: usize = 3;

impl ParamLayout {
    pub fn of(spec: &MlpSpec, attach_adaptive: bool) -> ParamLayout {
        let mut layers = Vec::with_capacity(spec.layer_widths.len() - 1);
        let mut off = 0;
        for win in spec.layer_widths.windows(2) {
            let (n_in, n_out) = (win[0], win[1]);
            layers.push(LayerBlock { w_off: off, b_off: off + n_in * n_out, n_in, n_out });
            off += n_in * n_out + n_out;
        }
        let lambda_off = attach_adaptive.then_some(off);
        let total = off + if attach_adaptive { N_ADAPTIVE } else { 0 };
        ParamLayout { layers, n_net: off, lambda_off, total }
    }
}

/// Network with its parameter layout resolved; the cheap handle every
/// evaluation path goes through.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layout: ParamLayout,
}

impl Mlp {
    pub fn new(spec: MlpSpec, attach_adaptive: bool) -> Result<Mlp, NetworkError> {
        spec.validate()?;
        let layout = ParamLayout::of(&spec, attach_adaptive);
        Ok(Mlp { spec, layout })
    }

    /// Kaiming-uniform weights in [-sqrt(6/fan_in), sqrt(6/fan_in)], zero
    /// biases, zero adaptive log-weights. Same seed, same vector.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0.0; self.layout.total];
        for lb in &self.layout.layers {
            let bound = (6.0 / lb.n_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            for w in &mut p[lb.w_off..lb.w_off + lb.n_in * lb.n_out] {
                *w = dist.sample(&mut rng);
            }
        }
        p
    }

    fn check_len(&self, params: &[f64]) -> Result<(), NetworkError> {
        if params.len() < self.layout.total {
            return Err(NetworkError::BadLength { got: params.len(), need: self.layout.total });
        }
        Ok(())
    }

    /// Value-only forward pass. Plain IEEE arithmetic; non-finite inputs or
    /// parameters propagate into the result rather than erroring.
    pub fn value(&self, params: &[f64], x: f64, t: f64) -> f64 {
        let m = &self.spec.input_map;
        let mut cur = vec![(x - m.x_center) / m.x_half, (t - m.t_center) / m.t_half];
        let mut next = Vec::new();
        let last = self.layout.layers.len() - 1;
        for (li, lb) in self.layout.layers.iter().enumerate() {
            next.clear();
            for o in 0..lb.n_out {
                let mut acc = params[lb.b_off + o];
                let row = &params[lb.w_off + o * lb.n_in..lb.w_off + (o + 1) * lb.n_in];
                for (w, h) in row.iter().zip(&cur) {
                    acc += w * h;
                }
                next.push(acc);
            }
            if li != last {
                for h in &mut next {
                    *h = crate::autodiff::jet::silu_value(*h);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }

    /// Jet-mode forward pass carrying u, u_x, u_t, u_xt, u_xx, u_xxt with
    /// respect to the raw inputs. The value component reproduces
    /// [`Mlp::value`] bit for bit: the accumulation order is identical.
    pub fn jet(&self, params: &[f64], x: f64, t: f64) -> Result<Jet, NetworkError> {
        self.check_len(params)?;
        let m = &self.spec.input_map;
        let xm = Jet {
            v: (x - m.x_center) / m.x_half,
            dx: 1.0 / m.x_half,
            ..Jet::ZERO
        };
        let tm = Jet {
            v: (t - m.t_center) / m.t_half,
            dt: 1.0 / m.t_half,
            ..Jet::ZERO
        };
        let mut cur = vec![xm, tm];
        let mut next = Vec::new();
        let last = self.layout.layers.len() - 1;
        for (li, lb) in self.layout.layers.iter().enumerate() {
            next.clear();
            for o in 0..lb.n_out {
                let mut acc = Jet::constant(params[lb.b_off + o]);
                let row = &params[lb.w_off + o * lb.n_in..lb.w_off + (o + 1) * lb.n_in];
                for (w, h) in row.iter().zip(&cur) {
                    acc = acc + h.scale(*w);
                }
                next.push(acc);
            }
            if li != last {
                for h in &mut next {
                    *h = h.silu();
                }
            }
            if next.iter().any(|j| !j.is_finite()) {
                return Err(NetworkError::NonFinite { layer: li });
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur[0])
    }

    /// Record the forward pass for a batch of points onto a tape. Returns
    /// the width-1 jet node of the output layer; `comps` selects how many
    /// jet planes the batch carries (1, 2 or 6).
    pub fn record(
        &self,
        tape: &mut Tape,
        pts: Vec<(f64, f64)>,
        comps: usize,
    ) -> Result<NodeId, AutodiffError> {
        let m = &self.spec.input_map;
        let mut node =
            tape.seed_points(pts, m.x_center, 1.0 / m.x_half, m.t_center, 1.0 / m.t_half, comps)?;
        let last = self.layout.layers.len() - 1;
        for (li, lb) in self.layout.layers.iter().enumerate() {
            node = tape.affine(node, lb.w_off, lb.b_off, lb.n_in, lb.n_out)?;
            if li != last {
                node = tape.silu(node)?;
            }
        }
        Ok(node)
    }
}

/// Convenience wrapper matching the initialization contract directly.
pub fn init_params(spec: &MlpSpec, seed: u64, attach_adaptive: bool) -> Result<Vec<f64>, NetworkError> {
    Ok(Mlp::new(spec.clone(), attach_adaptive)?.init_params(seed))
}

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{init_weight, stream_id, DType, InitScheme, Rng, Tensor};

/// One decoder layer's weights, stored unsharded. Ranks take column
/// (attention heads, FFN intermediate) or row (output projections) slices.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `[H x heads*hd]`
    pub wq: Tensor,
    /// `[H x kv_heads*hd]`
    pub wk: Tensor,
    pub wv: Tensor,
    /// `[heads*hd x H]`, row-parallel.
    pub wo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    /// `[H x I]`
    pub w_gate: Tensor,
    pub w_up: Tensor,
    /// `[I x H]`, row-parallel.
    pub w_down: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

const LAYER_FIELDS: [&str; 11] = [
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "ln1.gain",
    "ln1.bias",
    "ffn.w_gate",
    "ffn.w_up",
    "ffn.w_down",
    "ln2.gain",
    "ln2.bias",
];

impl LayerParams {
    fn fields(&self) -> [&Tensor; 11] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 11] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

/// All model parameters (or a gradient with the same layout).
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `[V x H]`
    pub embed: Tensor,
    pub layers: Vec<LayerParams>,
    /// `[H x V]`
    pub head: Tensor,
}

impl Params {
    /// Seeded initialization; each tensor draws from its own stream keyed by
    /// name, so values do not depend on the TP degree.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Params> {
        let (h, hd, i, v) = (cfg.hidden, cfg.head_dim(), cfg.ffn_hidden(), cfg.vocab);
        let draw = |name: &str, fi: usize, fo: usize, scheme: InitScheme| -> Result<Tensor> {
            let mut rng = Rng::new(seed, stream_id("param", &[stream_id(name, &[])]));
            init_weight(fi, fo, scheme, &mut rng)
        };
        let xavier = InitScheme::XavierUniform;
        let kaiming = InitScheme::KaimingUniform;
        let ones = || Tensor::full(vec![h], 1.0, DType::F32);
        let zeros = || Tensor::zeros(vec![h], DType::F32);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let n = |f: &str| format!("layers.{l}.{f}");
            layers.push(LayerParams {
                wq: draw(&n("attn.wq"), h, cfg.heads * hd, xavier)?,
                wk: draw(&n("attn.wk"), h, cfg.kv_heads * hd, xavier)?,
                wv: draw(&n("attn.wv"), h, cfg.kv_heads * hd, xavier)?,
                wo: draw(&n("attn.wo"), cfg.heads * hd, h, xavier)?,
                ln1_gain: ones(),
                ln1_bias: zeros(),
                w_gate: draw(&n("ffn.w_gate"), h, i, kaiming)?,
                w_up: draw(&n("ffn.w_up"), h, i, kaiming)?,
                w_down: draw(&n("ffn.w_down"), i, h, xavier)?,
                ln2_gain: ones(),
                ln2_bias: zeros(),
            });
        }
        Ok(Params {
            embed: draw("embed", v, h, xavier)?,
            layers,
            head: draw("head", h, v, xavier)?,
        })
    }

    /// Same layout, all zeros, f32.
    pub fn zeros_like(&self) -> Params {
        let z = |t: &Tensor| Tensor::zeros(t.shape().to_vec(), DType::F32);
        Params {
            embed: z(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    ln1_gain: z(&l.ln1_gain),
                    ln1_bias: z(&l.ln1_bias),
                    w_gate: z(&l.w_gate),
                    w_up: z(&l.w_up),
                    w_down: z(&l.w_down),
                    ln2_gain: z(&l.ln2_gain),
                    ln2_bias: z(&l.ln2_bias),
                })
                .collect(),
            head: z(&self.head),
        }
    }

    /// Tensors in canonical order with their names.
    pub fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (f, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{l}.{f}"), t));
            }
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.head);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.entries().into_iter().map(|(_, t)| t).collect()
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bit_eq(&self, other: &Params) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.bit_eq(y))
    }

    /// Name of the first tensor whose bits differ, in canonical order.
    pub fn first_difference(&self, other: &Params) -> Option<String> {
        self.entries()
            .into_iter()
            .zip(other.tensors())
            .find(|((_, a), b)| !a.bit_eq(b))
            .map(|((n, _), _)| n)
    }

    /// L2 norm of the elementwise difference, accumulated in f64.
    pub fn diff_l2(&self, other: &Params) -> Result<f64> {
        let (a, b) = (self.tensors(), other.tensors());
        if a.len() != b.len() {
            return Err(Error::contract("parameter layouts differ"));
        }
        let mut sq = 0.0f64;
        for (x, y) in a.iter().zip(&b) {
            if x.shape() != y.shape() {
                return Err(Error::contract("parameter shapes differ"));
            }
            for (p, q) in x.data().iter().zip(y.data()) {
                let d = *p as f64 - *q as f64;
                sq += d * d;
            }
        }
        Ok(sq.sqrt())
    }

    /// Applies `f` elementwise over matching tensors of `self` and `other`.
    pub fn zip_apply(&mut self, other: &Params, mut f: impl FnMut(&mut f32, f32)) {
        for (x, y) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                f(p, *q);
            }
        }
    }
}

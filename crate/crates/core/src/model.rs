//! Two-branch multi-scale network with hierarchical cross-attention fusion.
//!
//! A vision branch (RGB face crop) and an acoustic branch (echo spectrogram)
//! each run three conv blocks. After selected blocks a hierarchical
//! cross-attention module (HCAM) pools both feature maps onto a common grid,
//! lets each modality attend to the other, and concatenates the result with
//! the carry from the previous HCAM. Three single-logit heads read the
//! vision features, the acoustic features and the last fused map.

use std::fmt;
use std::str::FromStr;

use m3fas_numerics::{
    BatchStats, NormMode, NumericsError, ParamId, ParamStore, RunningStats, Tape, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("route `{route}` needs the {modality} input")]
    MissingInput { route: Route, modality: Modality },
    #[error("{modality} input has shape {got:?}, expected [N, {}, {}, {}]", expected[0], expected[1], expected[2])]
    InputShape {
        modality: Modality,
        got: Vec<usize>,
        expected: [usize; 3],
    },
    #[error("loss needs all three head outputs")]
    IncompleteOutput,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Vision,
    Acoustic,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Vision => "vision",
            Modality::Acoustic => "acoustic",
        })
    }
}

/// Which heads produce a decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Route {
    Vision,
    Acoustic,
    /// Runs both branches and all three heads.
    Fusion,
}

impl Route {
    pub fn needs(self, m: Modality) -> bool {
        matches!(
            (self, m),
            (Route::Fusion, _)
                | (Route::Vision, Modality::Vision)
                | (Route::Acoustic, Modality::Acoustic)
        )
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::Vision => "vision",
            Route::Acoustic => "acoustic",
            Route::Fusion => "fusion",
        })
    }
}

impl FromStr for Route {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "v" | "vision" => Ok(Route::Vision),
            "a" | "acoustic" => Ok(Route::Acoustic),
            "f" | "fusion" => Ok(Route::Fusion),
            other => Err(format!("unknown route `{other}` (expected v, a or f)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionStrategy {
    /// Channel concatenation.
    Cat,
    /// Elementwise mean.
    Avg,
    /// Residual: `z_v + Conv1x1([z_v, z_a])`.
    Res,
    /// Concatenation of `(1-θ)·BN + θ·LN` of each stream.
    Wbln,
    /// Cross-modality attention in both directions.
    Ca,
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionStrategy::Cat => "cat",
            FusionStrategy::Avg => "avg",
            FusionStrategy::Res => "res",
            FusionStrategy::Wbln => "wbln",
            FusionStrategy::Ca => "ca",
        })
    }
}

impl FromStr for FusionStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cat" => Ok(Self::Cat),
            "avg" => Ok(Self::Avg),
            "res" => Ok(Self::Res),
            "wbln" => Ok(Self::Wbln),
            "ca" => Ok(Self::Ca),
            other => Err(format!("unknown fusion strategy `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchConfig {
    /// `[channels, height, width]` of one sample.
    pub input_shape: [usize; 3],
    pub block_layers: [usize; 3],
    pub widths: [usize; 3],
}

impl BranchConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(format!("{name} branch: {m}")));
        if self.block_layers.iter().sum::<usize>() != 8 || self.block_layers.contains(&0) {
            return bad(format!(
                "block layers {:?} must be positive and sum to 8",
                self.block_layers
            ));
        }
        if self.widths.contains(&0) || self.input_shape.contains(&0) {
            return bad("widths and input dimensions must be positive".into());
        }
        if self.input_shape[1] < 8 || self.input_shape[2] < 8 {
            return bad(format!(
                "input {:?} is too small for three 2x2 pools",
                self.input_shape
            ));
        }
        Ok(())
    }

    /// Spatial size after block `k` (0-based).
    pub fn block_hw(&self, k: usize) -> (usize, usize) {
        let shift = k + 1;
        (self.input_shape[1] >> shift, self.input_shape[2] >> shift)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vision: BranchConfig,
    pub acoustic: BranchConfig,
    /// Channels each modality is projected to inside an HCAM.
    pub hcam_channels: usize,
    /// Query/key dimension of the attention.
    pub key_dim: usize,
    /// Token grid of each HCAM level.
    pub hcam_grids: [(usize, usize); 3],
    /// Enabled HCAM levels (1-based, ascending); must include 3.
    pub hcam_levels: Vec<usize>,
    pub fusion: FusionStrategy,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vision: BranchConfig {
                input_shape: [3, 32, 32],
                block_layers: [3, 3, 2],
                widths: [16, 32, 64],
            },
            acoustic: BranchConfig {
                input_shape: [1, 33, 30],
                block_layers: [3, 3, 2],
                widths: [16, 32, 64],
            },
            hcam_channels: 32,
            key_dim: 32,
            hcam_grids: [(4, 4), (4, 4), (2, 2)],
            hcam_levels: vec![1, 2, 3],
            fusion: FusionStrategy::Ca,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Narrow variant sized for single-core training runs.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.vision.widths = [4, 8, 8];
        c.acoustic.widths = [4, 8, 8];
        c.hcam_channels = 8;
        c.key_dim = 8;
        c
    }

    /// Four-channel model on 8×8 inputs, small enough for exhaustive gradient checks.
    pub fn tiny() -> Self {
        let branch = |c: usize| BranchConfig {
            input_shape: [c, 8, 8],
            block_layers: [3, 3, 2],
            widths: [4, 4, 4],
        };
        Self {
            vision: branch(3),
            acoustic: branch(1),
            hcam_channels: 4,
            key_dim: 4,
            hcam_grids: [(2, 2), (2, 2), (1, 1)],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate("vision")?;
        self.acoustic.validate("acoustic")?;
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.hcam_channels == 0 || self.key_dim == 0 {
            return bad("hcam channels and key dimension must be positive".into());
        }
        let levels = &self.hcam_levels;
        if levels.last() != Some(&3) || levels.windows(2).any(|w| w[0] >= w[1]) || levels[0] < 1 {
            return bad(format!(
                "hcam levels {levels:?} must be ascending within 1..=3 and include 3"
            ));
        }
        for &l in levels {
            let (gh, gw) = self.hcam_grids[l - 1];
            let (vh, vw) = self.vision.block_hw(l - 1);
            let (ah, aw) = self.acoustic.block_hw(l - 1);
            if gh == 0 || gw == 0 || gh > vh.min(ah) || gw > vw.min(aw) {
                return bad(format!(
                    "hcam {l} grid {gh}x{gw} exceeds block features {vh}x{vw} / {ah}x{aw}"
                ));
            }
        }
        for w in levels.windows(2) {
            let (a, b) = (self.hcam_grids[w[0] - 1], self.hcam_grids[w[1] - 1]);
            if b.0 > a.0 || b.1 > a.1 {
                return bad(format!(
                    "hcam {} grid {b:?} is larger than its carry grid {a:?}",
                    w[1]
                ));
            }
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("batch-norm eps must be positive and momentum within [0, 1]".into());
        }
        Ok(())
    }

    /// Channels each stream contributes after mixing.
    fn mixed_channels(&self) -> usize {
        match self.fusion {
            FusionStrategy::Avg | FusionStrategy::Res => self.hcam_channels,
            _ => 2 * self.hcam_channels,
        }
    }

    /// Output channels of each enabled HCAM, in level order.
    pub fn hcam_out_channels(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut carry = 0;
        for _ in &self.hcam_levels {
            carry += self.mixed_channels();
            out.push(carry);
        }
        out
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    w: ParamId,
    g: ParamId,
    b: ParamId,
    bn: usize,
}

#[derive(Clone, Debug)]
struct Head {
    g: ParamId,
    b: ParamId,
    bn: usize,
    fc_w: ParamId,
    fc_b: ParamId,
}

#[derive(Clone, Debug)]
struct CmaIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    gamma: ParamId,
}

#[derive(Clone, Debug)]
struct WblnIds {
    bn_g: ParamId,
    bn_b: ParamId,
    bn: usize,
    ln_g: ParamId,
    ln_b: ParamId,
    theta: ParamId,
}

#[derive(Clone, Debug)]
enum MixIds {
    Cat,
    Avg,
    Res { w: ParamId, b: ParamId },
    Wbln { v: WblnIds, a: WblnIds },
    Ca { va: CmaIds, av: CmaIds },
}

#[derive(Clone, Debug)]
struct HcamIds {
    level: usize,
    conv_v: (ParamId, ParamId),
    conv_a: (ParamId, ParamId),
    mix: MixIds,
}

#[derive(Clone, Debug)]
struct Layout {
    vision: Vec<Vec<ConvBn>>,
    acoustic: Vec<Vec<ConvBn>>,
    hcams: Vec<HcamIds>,
    head_v: Head,
    head_a: Head,
    head_f: Head,
}

struct Builder<'a> {
    params: ParamStore,
    bn_names: Vec<String>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let t = Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), self.rng);
        self.params.add(name, t)
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) -> ParamId {
        self.params.add(name, Tensor::full(shape, v))
    }

    fn bn(&mut self, prefix: &str, c: usize) -> (ParamId, ParamId, usize) {
        let g = self.fill(format!("{prefix}.gamma"), &[c], 1.0);
        let b = self.fill(format!("{prefix}.beta"), &[c], 0.0);
        self.bn_names.push(prefix.to_string());
        (g, b, self.bn_names.len() - 1)
    }

    fn branch(&mut self, name: &str, cfg: &BranchConfig) -> Vec<Vec<ConvBn>> {
        let mut cin = cfg.input_shape[0];
        let mut blocks = Vec::new();
        for (k, (&layers, &width)) in cfg.block_layers.iter().zip(&cfg.widths).enumerate() {
            let mut block = Vec::new();
            for l in 0..layers {
                let prefix = format!("{name}.b{}.c{}", k + 1, l + 1);
                let w = self.he(format!("{prefix}.w"), &[width, cin, 3, 3], cin * 9);
                let (g, b, bn) = self.bn(&format!("{prefix}.bn"), width);
                block.push(ConvBn { w, g, b, bn });
                cin = width;
            }
            blocks.push(block);
        }
        blocks
    }

    fn head(&mut self, name: &str, c: usize) -> Head {
        let (g, b, bn) = self.bn(&format!("head.{name}.bn"), c);
        let fc_w = self.he(format!("head.{name}.fc.w"), &[1, c], c);
        let fc_b = self.fill(format!("head.{name}.fc.b"), &[1], 0.0);
        Head {
            g,
            b,
            bn,
            fc_w,
            fc_b,
        }
    }

    fn cma(&mut self, prefix: &str, c: usize, d: usize) -> CmaIds {
        let std = 1.0 / (c as f64).sqrt();
        let mat = |s: &mut Self, n: &str, cols: usize| {
            let t = Tensor::randn(&[c, cols], std, s.rng);
            s.params.add(format!("{prefix}.{n}"), t)
        };
        let wq = mat(self, "wq", d);
        let wk = mat(self, "wk", d);
        let wv = mat(self, "wv", c);
        let gamma = self.fill(format!("{prefix}.gamma"), &[1], 0.0);
        CmaIds { wq, wk, wv, gamma }
    }

    fn wbln(&mut self, prefix: &str, c: usize) -> WblnIds {
        let (bn_g, bn_b, bn) = self.bn(&format!("{prefix}.bn"), c);
        let ln_g = self.fill(format!("{prefix}.ln.gamma"), &[c], 1.0);
        let ln_b = self.fill(format!("{prefix}.ln.beta"), &[c], 0.0);
        let theta = self.fill(format!("{prefix}.theta"), &[1], 0.5);
        WblnIds {
            bn_g,
            bn_b,
            bn,
            ln_g,
            ln_b,
            theta,
        }
    }
}

/// Model parameters, batch-norm running statistics and the architecture they belong to.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Running statistics of every batch-norm layer, parallel to [`Model::bn_names`].
    pub running: Vec<RunningStats>,
    bn_names: Vec<String>,
    layout: Layout,
}

/// Head logits (shape `[N]`) produced by one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ModelOutput {
    pub logit_v: Option<Var>,
    pub logit_a: Option<Var>,
    pub logit_f: Option<Var>,
    pub vision_features: Option<Var>,
    pub acoustic_features: Option<Var>,
    pub fused_features: Option<Var>,
    /// Batch statistics of every batch-norm layer run in training phase.
    pub bn_updates: Vec<(usize, BatchStats)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Attention projections of one direction, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct CmaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub gamma: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CmaOutput {
    pub out: Var,
    /// `[N, Tq, Tk]` attention weights.
    pub attention: Var,
}

fn shape_err(op: &'static str, detail: String) -> ModelError {
    ModelError::Numerics(NumericsError::ShapeMismatch { op, detail })
}

/// `z_q + γ · softmax(z_q W_Q (z_kv W_K)ᵀ / √d) · z_kv W_V` on `[N, T, C]` tokens.
pub fn cma(tape: &mut Tape, z_q: Var, z_kv: Var, p: &CmaVars) -> Result<CmaOutput> {
    let (sq, skv) = (tape.shape(z_q).to_vec(), tape.shape(z_kv).to_vec());
    let (&[n, tq, c], &[n2, tk, c2]) = (&sq[..], &skv[..]) else {
        return Err(shape_err(
            "cma",
            format!("tokens {sq:?} and {skv:?} must be [N, T, C]"),
        ));
    };
    let (swq, swk, swv) = (
        tape.shape(p.wq).to_vec(),
        tape.shape(p.wk).to_vec(),
        tape.shape(p.wv).to_vec(),
    );
    if n != n2 || c != c2 || swq.len() != 2 || swq[0] != c || swk != swq || swv != [c, c] {
        return Err(shape_err(
            "cma",
            format!("tokens {sq:?}/{skv:?} with W_Q {swq:?}, W_K {swk:?}, W_V {swv:?}"),
        ));
    }
    let d = swq[1];
    let project = |tape: &mut Tape, z: Var, t: usize, w: Var, out: usize| -> Result<Var> {
        let flat = tape.reshape(z, &[n * t, c])?;
        let y = tape.matmul(flat, w)?;
        Ok(tape.reshape(y, &[n, t, out])?)
    };
    let q = project(tape, z_q, tq, p.wq, d)?;
    let k = project(tape, z_kv, tk, p.wk, d)?;
    let v = project(tape, z_kv, tk, p.wv, c)?;
    let kt = tape.transpose_last2(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attention = tape.softmax(scores)?;
    let mixed = tape.matmul(attention, v)?;
    let gated = tape.scale_by(mixed, p.gamma)?;
    let out = tape.add(z_q, gated)?;
    Ok(CmaOutput { out, attention })
}

/// `[N, C, H, W] → [N, H·W, C]`.
pub fn to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let &[n, c, h, w] = tape.shape(x) else {
        return Err(shape_err(
            "to_tokens",
            format!("{:?} is not NCHW", tape.shape(x)),
        ));
    };
    let flat = tape.reshape(x, &[n, c, h * w])?;
    Ok(tape.permute(flat, &[0, 2, 1])?)
}

/// `[N, H·W, C] → [N, C, H, W]`.
pub fn from_tokens(tape: &mut Tape, t: Var, h: usize, w: usize) -> Result<Var> {
    let &[n, hw, c] = tape.shape(t) else {
        return Err(shape_err(
            "from_tokens",
            format!("{:?} is not [N, T, C]", tape.shape(t)),
        ));
    };
    if hw != h * w {
        return Err(shape_err(
            "from_tokens",
            format!("{hw} tokens onto {h}x{w}"),
        ));
    }
    let chw = tape.permute(t, &[0, 2, 1])?;
    Ok(tape.reshape(chw, &[n, c, h, w])?)
}

/// One stream of the weighted batch/layer-norm blend.
#[derive(Clone, Copy, Debug)]
pub struct WblnVars<'a> {
    pub bn_gamma: Var,
    pub bn_beta: Var,
    pub bn_mode: NormMode<'a>,
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub theta: Var,
}

#[derive(Clone, Copy, Debug)]
pub enum FusionVars<'a> {
    Cat,
    Avg,
    Res { w: Var, b: Var },
    Wbln { v: WblnVars<'a>, a: WblnVars<'a> },
    Ca { va: CmaVars, av: CmaVars },
}

#[derive(Clone, Debug)]
pub struct FuseOutput {
    pub fused: Var,
    /// Batch statistics of the vision and acoustic WBLN batch norms, when trained.
    pub bn_stats: [Option<BatchStats>; 2],
}

/// `(1-θ)·BN(x) + θ·LN(x)`.
pub fn wbln(
    tape: &mut Tape,
    x: Var,
    p: &WblnVars<'_>,
    eps: f64,
) -> Result<(Var, Option<BatchStats>)> {
    let (bn, stats) = tape.batch_norm(x, p.bn_gamma, p.bn_beta, p.bn_mode, eps)?;
    let ln = tape.layer_norm(x, p.ln_gamma, p.ln_beta, eps)?;
    let keep = tape.affine(p.theta, -1.0, 1.0)?;
    let a = tape.scale_by(bn, keep)?;
    let b = tape.scale_by(ln, p.theta)?;
    Ok((tape.add(a, b)?, stats))
}

/// Mix two same-shape NCHW maps and append the (already pooled) carry along channels.
pub fn fuse_features(
    tape: &mut Tape,
    z_v: Var,
    z_a: Var,
    carry: Option<Var>,
    vars: &FusionVars<'_>,
    eps: f64,
) -> Result<FuseOutput> {
    let (sv, sa) = (tape.shape(z_v).to_vec(), tape.shape(z_a).to_vec());
    if sv != sa || sv.len() != 4 {
        return Err(shape_err(
            "fuse_features",
            format!("streams {sv:?} and {sa:?}"),
        ));
    }
    let mut bn_stats = [None, None];
    let mut parts = match vars {
        FusionVars::Cat => vec![z_v, z_a],
        FusionVars::Avg => {
            let s = tape.add(z_v, z_a)?;
            vec![tape.scale(s, 0.5)?]
        }
        FusionVars::Res { w, b } => {
            let both = tape.concat(&[z_v, z_a], 1)?;
            let r = tape.conv2d(both, *w, Some(*b), 1, 0)?;
            vec![tape.add(z_v, r)?]
        }
        FusionVars::Wbln { v, a } => {
            let (fv, sv) = wbln(tape, z_v, v, eps)?;
            let (fa, sa) = wbln(tape, z_a, a, eps)?;
            bn_stats = [sv, sa];
            vec![fv, fa]
        }
        FusionVars::Ca { va, av } => {
            let (h, w) = (sv[2], sv[3]);
            let tv = to_tokens(tape, z_v)?;
            let ta = to_tokens(tape, z_a)?;
            let v_att = cma(tape, tv, ta, va)?.out;
            let a_att = cma(tape, ta, tv, av)?.out;
            vec![
                from_tokens(tape, v_att, h, w)?,
                from_tokens(tape, a_att, h, w)?,
            ]
        }
    };
    if let Some(c) = carry {
        let sc = tape.shape(c);
        if sc.len() != 4 || sc[0] != sv[0] || sc[2..] != sv[2..] {
            return Err(shape_err(
                "fuse_features",
                format!("carry {sc:?} against streams {sv:?}"),
            ));
        }
        parts.push(c);
    }
    let fused = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, 1)?
    };
    Ok(FuseOutput { fused, bn_stats })
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub fusion: Var,
    pub vision: Var,
    pub acoustic: Var,
}

/// `L_f + α (L_v + L_a)` on plain numbers, evaluated in the same order as [`total_loss`].
pub fn combine_losses(l_f: f64, l_v: f64, l_a: f64, alpha: f64) -> f64 {
    l_f + alpha * (l_v + l_a)
}

/// Joint objective over the three heads with BCE on each logit.
pub fn total_loss(
    tape: &mut Tape,
    out: &ModelOutput,
    labels: &[f64],
    alpha: f64,
) -> Result<LossTerms> {
    let (Some(f), Some(v), Some(a)) = (out.logit_f, out.logit_v, out.logit_a) else {
        return Err(ModelError::IncompleteOutput);
    };
    let fusion = tape.bce_with_logits(f, labels)?;
    let vision = tape.bce_with_logits(v, labels)?;
    let acoustic = tape.bce_with_logits(a, labels)?;
    let singles = tape.add(vision, acoustic)?;
    let weighted = tape.scale(singles, alpha)?;
    let total = tape.add(fusion, weighted)?;
    Ok(LossTerms {
        total,
        fusion,
        vision,
        acoustic,
    })
}

/// Sigmoid scores per head for one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadScores {
    pub vision: Option<Vec<f64>>,
    pub acoustic: Option<Vec<f64>>,
    pub fusion: Option<Vec<f64>>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut b = Builder {
            params: ParamStore::new(),
            bn_names: Vec::new(),
            rng: &mut rng,
        };
        let vision = b.branch("vision", &config.vision);
        let acoustic = b.branch("acoustic", &config.acoustic);

        let ch = config.hcam_channels;
        let mut hcams = Vec::new();
        for &level in &config.hcam_levels {
            let p = format!("hcam{level}");
            let (cv, ca) = (
                config.vision.widths[level - 1],
                config.acoustic.widths[level - 1],
            );
            let wv = b.he(format!("{p}.conv_v.w"), &[ch, cv, 3, 3], cv * 9);
            let bv = b.fill(format!("{p}.conv_v.b"), &[ch], 0.0);
            let wa = b.he(format!("{p}.conv_a.w"), &[ch, ca, 3, 3], ca * 9);
            let ba = b.fill(format!("{p}.conv_a.b"), &[ch], 0.0);
            let mix = match config.fusion {
                FusionStrategy::Cat => MixIds::Cat,
                FusionStrategy::Avg => MixIds::Avg,
                FusionStrategy::Res => MixIds::Res {
                    w: b.he(format!("{p}.res.w"), &[ch, 2 * ch, 1, 1], 2 * ch),
                    b: b.fill(format!("{p}.res.b"), &[ch], 0.0),
                },
                FusionStrategy::Wbln => MixIds::Wbln {
                    v: b.wbln(&format!("{p}.wbln_v"), ch),
                    a: b.wbln(&format!("{p}.wbln_a"), ch),
                },
                FusionStrategy::Ca => MixIds::Ca {
                    va: b.cma(&format!("{p}.cma_va"), ch, config.key_dim),
                    av: b.cma(&format!("{p}.cma_av"), ch, config.key_dim),
                },
            };
            hcams.push(HcamIds {
                level,
                conv_v: (wv, bv),
                conv_a: (wa, ba),
                mix,
            });
        }
        let head_v = b.head("vision", config.vision.widths[2]);
        let head_a = b.head("acoustic", config.acoustic.widths[2]);
        let fused_c = *config
            .hcam_out_channels()
            .last()
            .expect("level 3 is enabled");
        let head_f = b.head("fusion", fused_c);

        let Builder {
            params, bn_names, ..
        } = b;
        let running = bn_names
            .iter()
            .map(|n| {
                let id = params
                    .id(&format!("{n}.gamma"))
                    .expect("bn gamma registered");
                RunningStats::new(params.get(id).value.numel())
            })
            .collect();
        Ok(Self {
            config,
            params,
            running,
            bn_names,
            layout: Layout {
                vision,
                acoustic,
                hcams,
                head_v,
                head_a,
                head_f,
            },
        })
    }

    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    /// Parameters that influence the given route's own head.
    pub fn route_params(&self, route: Route) -> Vec<ParamId> {
        let keep = |name: &str| match route {
            Route::Fusion => true,
            Route::Vision => name.starts_with("vision.") || name.starts_with("head.vision."),
            Route::Acoustic => name.starts_with("acoustic.") || name.starts_with("head.acoustic."),
        };
        self.params
            .iter()
            .filter(|(_, p)| keep(&p.name))
            .map(|(id, _)| id)
            .collect()
    }

    /// Fold training-phase batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (i, s) in updates {
            self.running[*i].update(s, m);
        }
    }

    fn bn_mode(&self, i: usize, phase: Phase) -> NormMode<'_> {
        match phase {
            Phase::Train => NormMode::Train,
            Phase::Eval => self.running[i].mode(),
        }
    }

    fn check_input(&self, tape: &Tape, x: Var, m: Modality) -> Result<()> {
        let expected = match m {
            Modality::Vision => self.config.vision.input_shape,
            Modality::Acoustic => self.config.acoustic.input_shape,
        };
        let s = tape.shape(x);
        if s.len() != 4 || s[0] == 0 || s[1..] != expected {
            return Err(ModelError::InputShape {
                modality: m,
                got: s.to_vec(),
                expected,
            });
        }
        Ok(())
    }

    fn branch_forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        blocks: &[Vec<ConvBn>],
        x: Var,
        phase: Phase,
        updates: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Vec<Var>> {
        let mut h = x;
        let mut outs = Vec::with_capacity(blocks.len());
        for block in blocks {
            for layer in block {
                let c = tape.conv2d(h, p[layer.w.0], None, 1, 1)?;
                let (n, stats) = tape.batch_norm(
                    c,
                    p[layer.g.0],
                    p[layer.b.0],
                    self.bn_mode(layer.bn, phase),
                    self.config.bn_eps,
                )?;
                if let Some(s) = stats {
                    updates.push((layer.bn, s));
                }
                h = tape.relu(n)?;
            }
            h = tape.maxpool2d(h, 2)?;
            outs.push(h);
        }
        Ok(outs)
    }

    fn head_forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        head: &Head,
        x: Var,
        phase: Phase,
        updates: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var> {
        let (n, stats) = tape.batch_norm(
            x,
            p[head.g.0],
            p[head.b.0],
            self.bn_mode(head.bn, phase),
            self.config.bn_eps,
        )?;
        if let Some(s) = stats {
            updates.push((head.bn, s));
        }
        let pooled = tape.global_avgpool(n)?;
        let logit = tape.linear(pooled, p[head.fc_w.0], p[head.fc_b.0])?;
        let batch = tape.shape(logit)[0];
        Ok(tape.reshape(logit, &[batch])?)
    }

    /// One HCAM level: project and pool both streams, pool the carry, then fuse.
    #[allow(clippy::too_many_arguments)]
    pub fn hcam_forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        index: usize,
        f_v: Var,
        f_a: Var,
        carry: Option<Var>,
        phase: Phase,
        updates: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var> {
        let ids = &self.layout.hcams[index];
        let (gh, gw) = self.config.hcam_grids[ids.level - 1];
        let stage = |tape: &mut Tape, f: Var, (w, b): (ParamId, ParamId)| -> Result<Var> {
            let c = tape.conv2d(f, p[w.0], Some(p[b.0]), 1, 1)?;
            let r = tape.relu(c)?;
            Ok(tape.adaptive_maxpool2d(r, gh, gw)?)
        };
        let z_v = stage(tape, f_v, ids.conv_v)?;
        let z_a = stage(tape, f_a, ids.conv_a)?;
        let carry = match carry {
            Some(c) => Some(tape.adaptive_maxpool2d(c, gh, gw)?),
            None => None,
        };
        let cma_vars = |c: &CmaIds| CmaVars {
            wq: p[c.wq.0],
            wk: p[c.wk.0],
            wv: p[c.wv.0],
            gamma: p[c.gamma.0],
        };
        let wbln_vars = |w: &WblnIds| WblnVars {
            bn_gamma: p[w.bn_g.0],
            bn_beta: p[w.bn_b.0],
            bn_mode: self.bn_mode(w.bn, phase),
            ln_gamma: p[w.ln_g.0],
            ln_beta: p[w.ln_b.0],
            theta: p[w.theta.0],
        };
        let vars = match &ids.mix {
            MixIds::Cat => FusionVars::Cat,
            MixIds::Avg => FusionVars::Avg,
            MixIds::Res { w, b } => FusionVars::Res {
                w: p[w.0],
                b: p[b.0],
            },
            MixIds::Wbln { v, a } => FusionVars::Wbln {
                v: wbln_vars(v),
                a: wbln_vars(a),
            },
            MixIds::Ca { va, av } => FusionVars::Ca {
                va: cma_vars(va),
                av: cma_vars(av),
            },
        };
        let out = fuse_features(tape, z_v, z_a, carry, &vars, self.config.bn_eps)?;
        if let MixIds::Wbln { v, a } = &ids.mix {
            for (bn, s) in [v.bn, a.bn].into_iter().zip(out.bn_stats) {
                if let Some(s) = s {
                    updates.push((bn, s));
                }
            }
        }
        Ok(out.fused)
    }

    /// Forward pass on tape variables. `params` must come from binding [`Model::params`]
    /// (or any same-shaped variables, e.g. for gradient checks).
    ///
    /// The vision and acoustic routes touch only their own branch; the fusion route
    /// runs everything and yields all three logits.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        image: Option<Var>,
        spectrogram: Option<Var>,
        route: Route,
        phase: Phase,
    ) -> Result<ModelOutput> {
        if params.len() != self.params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "{} parameter variables for a model with {}",
                params.len(),
                self.params.len()
            )));
        }
        let image = if route.needs(Modality::Vision) {
            let x = image.ok_or(ModelError::MissingInput {
                route,
                modality: Modality::Vision,
            })?;
            self.check_input(tape, x, Modality::Vision)?;
            Some(x)
        } else {
            None
        };
        let spectrogram = if route.needs(Modality::Acoustic) {
            let x = spectrogram.ok_or(ModelError::MissingInput {
                route,
                modality: Modality::Acoustic,
            })?;
            self.check_input(tape, x, Modality::Acoustic)?;
            Some(x)
        } else {
            None
        };
        if let (Some(i), Some(s)) = (image, spectrogram) {
            if tape.shape(i)[0] != tape.shape(s)[0] {
                return Err(shape_err(
                    "model_forward",
                    format!(
                        "image batch {:?} vs spectrogram batch {:?}",
                        tape.shape(i),
                        tape.shape(s)
                    ),
                ));
            }
        }

        let mut out = ModelOutput::default();
        let mut updates = Vec::new();
        let fv = match image {
            Some(x) => Some(self.branch_forward(
                tape,
                params,
                &self.layout.vision,
                x,
                phase,
                &mut updates,
            )?),
            None => None,
        };
        let fa = match spectrogram {
            Some(x) => Some(self.branch_forward(
                tape,
                params,
                &self.layout.acoustic,
                x,
                phase,
                &mut updates,
            )?),
            None => None,
        };
        if let Some(fv) = &fv {
            out.vision_features = Some(fv[2]);
            out.logit_v = Some(self.head_forward(
                tape,
                params,
                &self.layout.head_v,
                fv[2],
                phase,
                &mut updates,
            )?);
        }
        if let Some(fa) = &fa {
            out.acoustic_features = Some(fa[2]);
            out.logit_a = Some(self.head_forward(
                tape,
                params,
                &self.layout.head_a,
                fa[2],
                phase,
                &mut updates,
            )?);
        }
        if let (Route::Fusion, Some(fv), Some(fa)) = (route, &fv, &fa) {
            let mut carry = None;
            for (i, ids) in self.layout.hcams.iter().enumerate() {
                let k = ids.level - 1;
                carry = Some(self.hcam_forward(
                    tape,
                    params,
                    i,
                    fv[k],
                    fa[k],
                    carry,
                    phase,
                    &mut updates,
                )?);
            }
            let fused = carry.expect("at least one hcam");
            out.fused_features = Some(fused);
            out.logit_f = Some(self.head_forward(
                tape,
                params,
                &self.layout.head_f,
                fused,
                phase,
                &mut updates,
            )?);
        }
        out.bn_updates = updates;
        Ok(out)
    }

    /// Inference-phase sigmoid scores for a batch; inputs are `[N, C, H, W]` tensors.
    pub fn predict(
        &self,
        image: Option<&Tensor>,
        spectrogram: Option<&Tensor>,
        route: Route,
    ) -> Result<HeadScores> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|(_, p)| tape.constant(p.value.clone()))
            .collect();
        let image = image.map(|t| tape.constant(t.clone()));
        let spectrogram = spectrogram.map(|t| tape.constant(t.clone()));
        let out = self.forward(&mut tape, &params, image, spectrogram, route, Phase::Eval)?;
        let scores = |v: Option<Var>| {
            v.map(|v| {
                tape.value(v)
                    .data()
                    .iter()
                    .map(|&z| m3fas_numerics::ops::elementwise::sigmoid(z))
                    .collect()
            })
        };
        Ok(HeadScores {
            vision: scores(out.logit_v),
            acoustic: scores(out.logit_a),
            fusion: scores(out.logit_f),
        })
    }
}

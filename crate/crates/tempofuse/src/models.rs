//! The five classifier architectures over feature chunks: a residual
//! Mel backbone, two tempogram-only branch models, and the early/late
//! fusion combinations, plus checkpoint serialization.
//!
//! A `Model` owns its parameters and batchnorm running statistics; each
//! forward pass records onto a caller-supplied tape, so the same instance
//! serves training (f32), evaluation, and double-precision gradient
//! checking through the `Scalar` parameter.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Decoder, Encoder, FeatureKind, NormalizationStats};
use crate::mat::Matrix;
use crate::nn::{BnState, Mode, NodeId, Scalar, Tape, Tensor};

const CHECKPOINT_MAGIC: &[u8; 4] = b"TFCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Kernel sizes and strides of the four parallel 1-D convolutions.
pub const BRANCH_KERNELS: [usize; 4] = [3, 3, 5, 5];
pub const BRANCH_STRIDES: [usize; 4] = [2, 3, 3, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MelOnly,
    FtgOnly,
    ActgOnly,
    EarlyFusion,
    LateFusion,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::MelOnly,
        ModelKind::FtgOnly,
        ModelKind::ActgOnly,
        ModelKind::EarlyFusion,
        ModelKind::LateFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::MelOnly => "mel_only",
            ModelKind::FtgOnly => "ftg_only",
            ModelKind::ActgOnly => "actg_only",
            ModelKind::EarlyFusion => "early_fusion",
            ModelKind::LateFusion => "late_fusion",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "mel_only" => Some(ModelKind::MelOnly),
            "ftg_only" => Some(ModelKind::FtgOnly),
            "actg_only" => Some(ModelKind::ActgOnly),
            "early" | "early_fusion" => Some(ModelKind::EarlyFusion),
            "late" | "late_fusion" => Some(ModelKind::LateFusion),
            _ => None,
        }
    }

    pub fn needs_mel(self) -> bool {
        matches!(
            self,
            ModelKind::MelOnly | ModelKind::EarlyFusion | ModelKind::LateFusion
        )
    }

    pub fn needs_ftg(self) -> bool {
        !matches!(self, ModelKind::MelOnly | ModelKind::ActgOnly)
    }

    pub fn needs_actg(self) -> bool {
        !matches!(self, ModelKind::MelOnly | ModelKind::FtgOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub kind: ModelKind,
    pub n_classes: usize,
    /// Residual blocks in the Mel backbone.
    pub n_blocks: usize,
    /// Channel width of every backbone block.
    pub channels: usize,
    /// Width of the hidden dense layer.
    pub hidden: usize,
    /// Output channels of each tempo-branch convolution; also the
    /// embedding width.
    pub branch_channels: usize,
    pub mel_bins: usize,
    pub ftg_bins: usize,
    pub actg_bins: usize,
    pub chunk_len: usize,
    pub dropout: f64,
}

impl ArchConfig {
    /// Full-size architecture.
    pub fn full(kind: ModelKind, n_classes: usize) -> ArchConfig {
        ArchConfig {
            kind,
            n_classes,
            n_blocks: 7,
            channels: 128,
            hidden: 512,
            branch_channels: 64,
            mel_bins: 128,
            ftg_bins: 193,
            actg_bins: 384,
            chunk_len: 200,
            dropout: 0.5,
        }
    }

    /// Desk-scale capacity: 2 blocks of 8 channels, narrow dense layers.
    pub fn reduced(kind: ModelKind, n_classes: usize) -> ArchConfig {
        ArchConfig {
            n_blocks: 2,
            channels: 8,
            hidden: 32,
            branch_channels: 8,
            ..ArchConfig::full(kind, n_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.n_blocks < 1
            || self.channels == 0
            || self.hidden == 0
            || self.branch_channels == 0
        {
            return Err(Error::InvalidArgument("zero-sized architecture".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        if self.kind.needs_mel() {
            let (mut h, mut w) = (self.mel_bins, self.chunk_len);
            for b in 0..self.n_blocks {
                if h < 2 || w < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "mel input {}x{} shrinks below the 2x2 pool at block {b}",
                        self.mel_bins, self.chunk_len
                    )));
                }
                h /= 2;
                w /= 2;
            }
        }
        if self.kind.needs_ftg() || self.kind.needs_actg() {
            let k = BRANCH_KERNELS.iter().max().unwrap();
            if self.chunk_len < *k {
                return Err(Error::InvalidArgument(format!(
                    "chunk length {} shorter than branch kernel {k}",
                    self.chunk_len
                )));
            }
        }
        Ok(())
    }

    /// Width of the feature vector entering the dense classifier.
    pub fn classifier_input(&self) -> usize {
        match self.kind {
            ModelKind::MelOnly => self.channels,
            ModelKind::FtgOnly | ModelKind::ActgOnly => self.branch_channels,
            ModelKind::EarlyFusion | ModelKind::LateFusion => {
                self.channels + self.branch_channels
            }
        }
    }
}

/// One minibatch of aligned feature chunks. A model reads only the
/// modalities its kind needs; the rest may stay `None`.
#[derive(Debug, Clone, Default)]
pub struct Batch<T: Scalar> {
    /// [N, 1, mel_bins, chunk_len]
    pub mel: Option<Tensor<T>>,
    /// [N, ftg_bins, chunk_len]
    pub ftg: Option<Tensor<T>>,
    /// [N, actg_bins, chunk_len]
    pub actg: Option<Tensor<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.mel
            .as_ref()
            .map(|t| t.shape()[0])
            .or_else(|| self.ftg.as_ref().map(|t| t.shape()[0]))
            .or_else(|| self.actg.as_ref().map(|t| t.shape()[0]))
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Node handles of one recorded forward pass.
pub struct ForwardPass {
    pub logits: NodeId,
    /// Leaf ids of the parameters, aligned with `Model::tensors`.
    pub param_ids: Vec<NodeId>,
}

pub struct Model<T: Scalar> {
    cfg: ArchConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    bn_names: Vec<String>,
    bn_states: Vec<BnState<T>>,
    bn_index: HashMap<String, usize>,
}

struct Registrar<'a, T: Scalar> {
    model: &'a mut Model<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Registrar<'_, T> {
    fn tensor(&mut self, name: &str, t: Tensor<T>) {
        let prev = self
            .model
            .index
            .insert(name.to_string(), self.model.tensors.len());
        assert!(prev.is_none(), "duplicate parameter {name}");
        self.model.names.push(name.to_string());
        self.model.tensors.push(t);
    }

    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let t = Tensor::kaiming_uniform(shape, fan_in, self.rng);
        self.tensor(name, t);
    }

    fn conv2d(&mut self, name: &str, c_out: usize, c_in: usize, kh: usize, kw: usize) {
        self.weight(&format!("{name}.w"), &[c_out, c_in, kh, kw], c_in * kh * kw);
        self.tensor(&format!("{name}.b"), Tensor::zeros(&[c_out]));
    }

    /// A conv that feeds batchnorm carries no bias: the normalizer's mean
    /// subtraction would cancel it, leaving a parameter with an
    /// identically zero gradient.
    fn conv2d_pre_bn(&mut self, name: &str, c_out: usize, c_in: usize, kh: usize, kw: usize) {
        self.weight(&format!("{name}.w"), &[c_out, c_in, kh, kw], c_in * kh * kw);
    }

    fn conv1d(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) {
        self.weight(&format!("{name}.w"), &[c_out, c_in, k], c_in * k);
        self.tensor(&format!("{name}.b"), Tensor::zeros(&[c_out]));
    }

    fn dense(&mut self, name: &str, f_out: usize, f_in: usize) {
        self.weight(&format!("{name}.w"), &[f_out, f_in], f_in);
        self.tensor(&format!("{name}.b"), Tensor::zeros(&[f_out]));
    }

    fn batchnorm(&mut self, name: &str, c: usize) {
        self.tensor(&format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        self.tensor(&format!("{name}.beta"), Tensor::zeros(&[c]));
        let prev = self
            .model
            .bn_index
            .insert(name.to_string(), self.model.bn_states.len());
        assert!(prev.is_none(), "duplicate batchnorm {name}");
        self.model.bn_names.push(name.to_string());
        self.model.bn_states.push(BnState::new(c));
    }

    fn branch_convs(&mut self, prefix: &str, c_in: usize, c_out: usize) {
        for (i, &k) in BRANCH_KERNELS.iter().enumerate() {
            self.conv1d(&format!("{prefix}.conv{i}"), c_out, c_in, k);
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Build a model with Kaiming-initialized weights. The seed fully
    /// determines the parameters.
    pub fn init(cfg: ArchConfig, seed: u64) -> Result<Model<T>> {
        cfg.validate()?;
        let mut model = Model {
            cfg: cfg.clone(),
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            bn_names: Vec::new(),
            bn_states: Vec::new(),
            bn_index: HashMap::new(),
        };
        let mut rng = rand::SeedableRng::seed_from_u64(seed);
        let mut reg = Registrar {
            model: &mut model,
            rng: &mut rng,
        };
        if cfg.kind.needs_mel() {
            for b in 0..cfg.n_blocks {
                let c_in = if b == 0 { 1 } else { cfg.channels };
                reg.conv2d_pre_bn(&format!("block{b}.conv1"), cfg.channels, c_in, 3, 3);
                reg.batchnorm(&format!("block{b}.bn1"), cfg.channels);
                reg.conv2d_pre_bn(&format!("block{b}.conv2"), cfg.channels, cfg.channels, 3, 3);
                reg.batchnorm(&format!("block{b}.bn2"), cfg.channels);
                if c_in != cfg.channels {
                    reg.conv2d(&format!("block{b}.proj"), cfg.channels, c_in, 1, 1);
                }
            }
        }
        match cfg.kind {
            ModelKind::MelOnly => {}
            ModelKind::FtgOnly => {
                reg.branch_convs("ftg", cfg.ftg_bins, cfg.branch_channels);
            }
            ModelKind::ActgOnly => {
                reg.branch_convs("actg", cfg.actg_bins, cfg.branch_channels);
            }
            ModelKind::EarlyFusion => {
                reg.branch_convs("tempo", cfg.ftg_bins + cfg.actg_bins, cfg.branch_channels);
            }
            ModelKind::LateFusion => {
                reg.branch_convs("ftg", cfg.ftg_bins, cfg.branch_channels);
                reg.branch_convs("actg", cfg.actg_bins, cfg.branch_channels);
            }
        }
        if cfg.kind != ModelKind::MelOnly {
            reg.conv2d(
                "tempo2d",
                cfg.branch_channels,
                cfg.branch_channels,
                3,
                3,
            );
        }
        reg.dense("fc1", cfg.hidden, cfg.classifier_input());
        reg.dense("fc2", cfg.n_classes, cfg.hidden);
        Ok(model)
    }

    pub fn cfg(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.tensors.iter().map(|t| t.numel()).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn set_tensors(&mut self, tensors: &[Tensor<T>]) {
        assert_eq!(tensors.len(), self.tensors.len());
        for (dst, src) in self.tensors.iter_mut().zip(tensors) {
            assert_eq!(dst.shape(), src.shape());
            *dst = src.clone();
        }
    }

    /// Snapshot of everything a forward pass depends on.
    pub fn state_clone(&self) -> (Vec<Tensor<T>>, Vec<BnState<T>>) {
        (self.tensors.clone(), self.bn_states.clone())
    }

    pub fn restore_state(&mut self, state: &(Vec<Tensor<T>>, Vec<BnState<T>>)) {
        self.set_tensors(&state.0);
        assert_eq!(state.1.len(), self.bn_states.len());
        self.bn_states = state.1.clone();
    }

    fn check_modalities(&self, batch: &Batch<T>) -> Result<usize> {
        let cfg = &self.cfg;
        let n = batch.len();
        if n == 0 {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        if cfg.kind.needs_mel() {
            match &batch.mel {
                Some(t) if t.shape() == [n, 1, cfg.mel_bins, cfg.chunk_len] => {}
                Some(t) => {
                    return Err(Error::Shape(format!(
                        "mel chunk batch is {:?}, model wants {:?}",
                        t.shape(),
                        [n, 1, cfg.mel_bins, cfg.chunk_len]
                    )))
                }
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "model kind {} needs the mel modality",
                        cfg.kind.name()
                    )))
                }
            }
        }
        check_tempo_inputs(cfg, n, batch.ftg.as_ref(), batch.actg.as_ref())?;
        Ok(n)
    }

    /// Record one forward pass onto `tape` and return the logits node.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        batch: &Batch<T>,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass> {
        self.check_modalities(batch)?;
        let cfg = self.cfg.clone();
        let param_ids: Vec<NodeId> = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let index = &self.index;
        let id = |name: &str| -> NodeId {
            param_ids[*index.get(name).unwrap_or_else(|| panic!("no parameter {name}"))]
        };
        let bn_index = &self.bn_index;
        let bn_states = &mut self.bn_states;

        let mut features: Vec<NodeId> = Vec::new();
        if cfg.kind.needs_mel() {
            let mut x = tape.leaf(batch.mel.clone().expect("checked"), false);
            // The block convs are biasless (batchnorm follows them); the
            // kernel still wants a bias operand, so hand it a frozen zero.
            let no_bias = tape.leaf(Tensor::zeros(&[cfg.channels]), false);
            for b in 0..cfg.n_blocks {
                let pre = format!("block{b}");
                let y = tape.conv2d(x, id(&format!("{pre}.conv1.w")), no_bias, (1, 1), (1, 1))?;
                let st = &mut bn_states[bn_index[&format!("{pre}.bn1")]];
                let y = tape.batchnorm(y, id(&format!("{pre}.bn1.gamma")), id(&format!("{pre}.bn1.beta")), st)?;
                let y = tape.relu(y);
                let y = tape.conv2d(y, id(&format!("{pre}.conv2.w")), no_bias, (1, 1), (1, 1))?;
                let st = &mut bn_states[bn_index[&format!("{pre}.bn2")]];
                let y = tape.batchnorm(y, id(&format!("{pre}.bn2.gamma")), id(&format!("{pre}.bn2.beta")), st)?;
                let skip = if index.contains_key(&format!("{pre}.proj.w")) {
                    tape.conv2d(x, id(&format!("{pre}.proj.w")), id(&format!("{pre}.proj.b")), (1, 1), (0, 0))?
                } else {
                    x
                };
                let y = tape.add(y, skip)?;
                let y = tape.relu(y);
                x = tape.maxpool2d(y, (2, 2), (2, 2))?;
            }
            features.push(tape.global_max_pool(x)?);
        }
        if cfg.kind != ModelKind::MelOnly {
            features.push(record_tempo_branch(
                tape,
                &cfg,
                &id,
                batch.ftg.as_ref(),
                batch.actg.as_ref(),
            )?);
        }
        let feat = if features.len() == 1 {
            features[0]
        } else {
            tape.concat_features(&features)?
        };
        let h = tape.dense(feat, id("fc1.w"), id("fc1.b"))?;
        let h = tape.relu(h);
        let h = tape.dropout(h, cfg.dropout, dropout_rng)?;
        let logits = tape.dense(h, id("fc2.w"), id("fc2.b"))?;
        Ok(ForwardPass { logits, param_ids })
    }

    /// The tempo-branch embedding alone (fusion and tempogram-only kinds).
    pub fn tempo_embedding(
        &mut self,
        tape: &mut Tape<T>,
        ftg: Option<&Tensor<T>>,
        actg: Option<&Tensor<T>>,
    ) -> Result<NodeId> {
        if self.cfg.kind == ModelKind::MelOnly {
            return Err(Error::InvalidArgument(
                "mel_only models have no tempo branch".into(),
            ));
        }
        let cfg = self.cfg.clone();
        let n = ftg
            .map(|t| t.shape()[0])
            .or_else(|| actg.map(|t| t.shape()[0]))
            .unwrap_or(0);
        if n == 0 {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        check_tempo_inputs(&cfg, n, ftg, actg)?;
        let param_ids: Vec<NodeId> = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let index = &self.index;
        let id = |name: &str| -> NodeId { param_ids[index[name]] };
        record_tempo_branch(tape, &cfg, &id, ftg, actg)
    }
}

fn check_tempo_inputs<T: Scalar>(
    cfg: &ArchConfig,
    n: usize,
    ftg: Option<&Tensor<T>>,
    actg: Option<&Tensor<T>>,
) -> Result<()> {
    let check = |t: Option<&Tensor<T>>, bins: usize, name: &str, needed: bool| -> Result<()> {
        if !needed {
            // An unused modality may ride along in any shape.
            return Ok(());
        }
        match t {
            Some(t) if t.shape() == [n, bins, cfg.chunk_len] => Ok(()),
            Some(t) => Err(Error::Shape(format!(
                "{name} chunk batch is {:?}, model wants {:?}",
                t.shape(),
                [n, bins, cfg.chunk_len]
            ))),
            None => Err(Error::InvalidArgument(format!(
                "model kind {} needs the {name} modality",
                cfg.kind.name()
            ))),
        }
    };
    check(ftg, cfg.ftg_bins, "fourier-tempogram", cfg.kind.needs_ftg())?;
    check(actg, cfg.actg_bins, "ac-tempogram", cfg.kind.needs_actg())
}

/// Record the four 1-D convolutions, the stacked 2-D stage, and the final
/// pooling of the tempo branch. `id` resolves parameter names to leaves
/// already on the tape.
fn record_tempo_branch<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ArchConfig,
    id: &dyn Fn(&str) -> NodeId,
    ftg: Option<&Tensor<T>>,
    actg: Option<&Tensor<T>>,
) -> Result<NodeId> {
    let branch = |tape: &mut Tape<T>, prefix: &str, input: NodeId| -> Result<Vec<NodeId>> {
        let mut outs = Vec::with_capacity(BRANCH_STRIDES.len());
        for (i, &stride) in BRANCH_STRIDES.iter().enumerate() {
            let y = tape.conv1d(
                input,
                id(&format!("{prefix}.conv{i}.w")),
                id(&format!("{prefix}.conv{i}.b")),
                stride,
                0,
            )?;
            outs.push(tape.mean_pool_time(y)?);
        }
        Ok(outs)
    };
    let pooled = match cfg.kind {
        ModelKind::FtgOnly => {
            let x = tape.leaf(ftg.expect("checked").clone(), false);
            branch(tape, "ftg", x)?
        }
        ModelKind::ActgOnly => {
            let x = tape.leaf(actg.expect("checked").clone(), false);
            branch(tape, "actg", x)?
        }
        ModelKind::EarlyFusion => {
            let joined = concat_bins(ftg.expect("checked"), actg.expect("checked"));
            let x = tape.leaf(joined, false);
            branch(tape, "tempo", x)?
        }
        ModelKind::LateFusion => {
            let f = tape.leaf(ftg.expect("checked").clone(), false);
            let a = tape.leaf(actg.expect("checked").clone(), false);
            let mut outs = branch(tape, "ftg", f)?;
            outs.extend(branch(tape, "actg", a)?);
            outs
        }
        ModelKind::MelOnly => unreachable!("callers exclude mel_only"),
    };
    let map = tape.stack_to_map(&pooled)?;
    let y = tape.conv2d(map, id("tempo2d.w"), id("tempo2d.b"), (1, 1), (1, 1))?;
    let y = tape.relu(y);
    tape.global_max_pool(y)
}

/// Concatenate two [N, B_i, T] tempogram batches along the bin axis.
fn concat_bins<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ba, t) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let bb = b.shape()[1];
    let mut out = Tensor::zeros(&[n, ba + bb, t]);
    let block_a = ba * t;
    let block_b = bb * t;
    let block_o = block_a + block_b;
    for s in 0..n {
        out.data_mut()[s * block_o..s * block_o + block_a]
            .copy_from_slice(&a.data()[s * block_a..(s + 1) * block_a]);
        out.data_mut()[s * block_o + block_a..(s + 1) * block_o]
            .copy_from_slice(&b.data()[s * block_b..(s + 1) * block_b]);
    }
    out
}

/// A trained model plus everything inference needs: normalization
/// statistics and the class-name table.
pub struct Checkpoint {
    pub model: Model<f32>,
    pub class_names: Vec<String>,
    pub stats: Vec<NormalizationStats>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ArchConfig,
    classes: Vec<String>,
    params: Vec<(String, Vec<usize>)>,
    bn: Vec<(String, usize)>,
    stats_kinds: Vec<u8>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.class_names.len() != self.model.cfg.n_classes {
            return Err(Error::Checkpoint(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.model.cfg.n_classes
            )));
        }
        let meta = CheckpointMeta {
            config: self.model.cfg.clone(),
            classes: self.class_names.clone(),
            params: self
                .model
                .names
                .iter()
                .zip(&self.model.tensors)
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
            bn: self
                .model
                .bn_names
                .iter()
                .zip(&self.model.bn_states)
                .map(|(n, s)| (n.clone(), s.running_mean.len()))
                .collect(),
            stats_kinds: self.stats.iter().map(|s| s.feature_kind.tag()).collect(),
        };
        let meta_bytes = serde_json::to_vec(&meta)
            .map_err(|e| Error::Checkpoint(format!("metadata serialization failed: {e}")))?;
        let mut enc = Encoder::new(CHECKPOINT_MAGIC);
        enc.u32(CHECKPOINT_VERSION);
        enc.u32(meta_bytes.len() as u32);
        enc.bytes(&meta_bytes);
        for t in &self.model.tensors {
            enc.matrix(0, &Matrix::from_vec(1, t.numel(), t.data().to_vec())?)?;
        }
        for s in &self.model.bn_states {
            let c = s.running_mean.len();
            let mut rows = s.running_mean.clone();
            rows.extend_from_slice(&s.running_var);
            enc.matrix(1, &Matrix::from_vec(2, c, rows)?)?;
        }
        for s in &self.stats {
            let mut rows = s.mean.clone();
            rows.extend_from_slice(&s.std);
            enc.matrix(s.feature_kind.tag(), &Matrix::from_vec(2, s.mean.len(), rows)?)?;
        }
        enc.finish(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut dec = Decoder::new(&bytes, path, CHECKPOINT_MAGIC)?;
        let version = dec.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{} has checkpoint version {version}, this build reads {CHECKPOINT_VERSION}",
                dec.path().display()
            )));
        }
        let meta_len = dec.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(dec.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad metadata in {}: {e}", dec.path().display())))?;
        if meta.classes.len() != meta.config.n_classes {
            return Err(Error::Checkpoint(format!(
                "{} class names for {} classes",
                meta.classes.len(),
                meta.config.n_classes
            )));
        }
        // The seed is irrelevant: every weight is overwritten below.
        let mut model: Model<f32> = Model::init(meta.config, 0)?;
        if meta.params.len() != model.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {} tensors, architecture has {}",
                meta.params.len(),
                model.tensors.len()
            )));
        }
        for (i, (name, shape)) in meta.params.iter().enumerate() {
            if &model.names[i] != name || model.tensors[i].shape() != &shape[..] {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} is {name} {shape:?}, architecture wants {} {:?}",
                    model.names[i],
                    model.tensors[i].shape()
                )));
            }
            let (_, m) = dec.matrix()?;
            if m.data().len() != model.tensors[i].numel() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} payload has {} values, want {}",
                    m.data().len(),
                    model.tensors[i].numel()
                )));
            }
            model.tensors[i].data_mut().copy_from_slice(m.data());
        }
        if meta.bn.len() != model.bn_states.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {} batchnorm states, architecture has {}",
                meta.bn.len(),
                model.bn_states.len()
            )));
        }
        for (i, (name, c)) in meta.bn.iter().enumerate() {
            if &model.bn_names[i] != name || model.bn_states[i].running_mean.len() != *c {
                return Err(Error::Checkpoint(format!(
                    "batchnorm state {i} mismatch: {name} with {c} channels"
                )));
            }
            let (_, m) = dec.matrix()?;
            if m.rows() != 2 || m.cols() != *c {
                return Err(Error::Checkpoint(format!(
                    "batchnorm state {name} payload is {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
            model.bn_states[i].running_mean.copy_from_slice(m.row(0));
            model.bn_states[i].running_var.copy_from_slice(m.row(1));
        }
        let mut stats = Vec::with_capacity(meta.stats_kinds.len());
        for &tag in &meta.stats_kinds {
            let kind = FeatureKind::from_tag(tag).ok_or_else(|| {
                Error::Checkpoint(format!("unknown feature kind tag {tag}"))
            })?;
            let (frame_tag, m) = dec.matrix()?;
            if frame_tag != tag || m.rows() != 2 {
                return Err(Error::Checkpoint(format!(
                    "normalization stats frame for {} is malformed",
                    kind.name()
                )));
            }
            stats.push(NormalizationStats {
                mean: m.row(0).to_vec(),
                std: m.row(1).to_vec(),
                feature_kind: kind,
            });
        }
        dec.expect_done()?;
        Ok(Checkpoint {
            model,
            class_names: meta.classes,
            stats,
        })
    }

    pub fn stats_for(&self, kind: FeatureKind) -> Option<&NormalizationStats> {
        self.stats.iter().find(|s| s.feature_kind == kind)
    }
}

/// Reduced-width architecture on small inputs for finite-difference work.
/// Capacity matches the reduced config (two blocks, eight channels); the
/// feature axes shrink so a full re-evaluation per coordinate stays cheap.
/// The wiring is identical to the full model.
pub fn fd_check_arch(kind: ModelKind) -> ArchConfig {
    ArchConfig {
        kind,
        n_classes: 3,
        n_blocks: 2,
        channels: 8,
        hidden: 16,
        branch_channels: 6,
        mel_bins: 16,
        ftg_bins: 7,
        actg_bins: 9,
        chunk_len: 20,
        // Dropout must stay off: a fresh mask per evaluation would make
        // the central difference measure two different networks.
        dropout: 0.0,
    }
}

/// Compare one model kind's analytic gradients against f64 central
/// differences on a random two-sample batch. Coordinates that cross a
/// ReLU or pool decision boundary between the two probes are excluded
/// via the tape's branch fingerprint, not failed.
pub fn fd_check_model(
    kind: ModelKind,
    seed: u64,
    max_coords: usize,
) -> Result<crate::nn::GradCheckReport> {
    use rand::{Rng, SeedableRng};

    let arch = fd_check_arch(kind);
    let mut model: Model<f64> = Model::init(arch.clone(), seed)?;
    let params = model.tensors().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::data::splitmix64(seed ^ 3));
    let mut rand_tensor = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let batch = Batch {
        mel: kind
            .needs_mel()
            .then(|| rand_tensor(&[2, 1, arch.mel_bins, arch.chunk_len])),
        ftg: kind
            .needs_ftg()
            .then(|| rand_tensor(&[2, arch.ftg_bins, arch.chunk_len])),
        actg: kind
            .needs_actg()
            .then(|| rand_tensor(&[2, arch.actg_bins, arch.chunk_len])),
    };
    let labels = [0usize, 1];
    let cfg = crate::nn::GradCheckConfig {
        max_coords,
        ..crate::nn::GradCheckConfig::default()
    };
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(0);
    let eval = |ps: &[Tensor<f64>], want_grads: bool| -> Result<crate::nn::ForwardEval> {
        model.set_tensors(ps);
        let mut tape: Tape<f64> = Tape::new(Mode::Train);
        tape.record_patterns(true);
        let pass = model.forward(&mut tape, &batch, &mut dropout_rng)?;
        let loss = tape.cross_entropy(pass.logits, &labels)?;
        let loss_value = tape.value(loss).data()[0];
        let fingerprint = tape.pattern_fingerprint();
        let grads = if want_grads {
            tape.backward(loss)?;
            pass.param_ids
                .iter()
                .map(|&id| tape.grad(id).cloned())
                .collect()
        } else {
            Vec::new()
        };
        Ok(crate::nn::ForwardEval {
            loss: loss_value,
            grads,
            fingerprint,
        })
    };
    crate::nn::check_gradients(&params, &cfg, eval)
}

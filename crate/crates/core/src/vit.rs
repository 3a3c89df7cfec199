//! Pre-norm vision transformer with LoRA adapters on selected attention
//! projections and a dropout linear head, plus checkpoint persistence and
//! parameter accounting.
//!
//! Adapters follow y = xW^T + (alpha/r) * dropout(x) A^T B^T with A drawn
//! from N(0, 1/r) and B zero-initialized, so a freshly adapted model is
//! forward-identical to its base.

use crate::error::{Error, Result};
use crate::image::NormalizedImage;
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const LAYER_NORM_EPS: f32 = 1e-6;
pub const HEAD_DROPOUT: f32 = 0.5;
const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f32,
    pub n_classes: usize,
}

impl Default for ViTConfig {
    /// Desk-scale model: trains on CPU in minutes.
    fn default() -> Self {
        ViTConfig {
            image_size: 128,
            patch_size: 16,
            depth: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 4.0,
            n_classes: 2,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.image_size == 0 || self.patch_size == 0 {
            problems.push(format!(
                "image_size {} and patch_size {} must be positive",
                self.image_size, self.patch_size
            ));
        } else if self.image_size % self.patch_size != 0 {
            problems.push(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.depth == 0 {
            problems.push("depth must be at least 1".into());
        }
        if self.width == 0 || self.heads == 0 {
            problems.push(format!(
                "width {} and heads {} must be positive",
                self.width, self.heads
            ));
        } else if self.width % self.heads != 0 {
            problems.push(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            problems.push(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        if self.n_classes < 2 {
            problems.push(format!("n_classes {} must be at least 2", self.n_classes));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Token count including the classification token.
    pub fn tokens(&self) -> usize {
        let grid = self.image_size / self.patch_size;
        grid * grid + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.width as f32 * self.mlp_ratio) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

impl LoraTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            LoraTarget::Query => "query",
            LoraTarget::Key => "key",
            LoraTarget::Value => "value",
            LoraTarget::Output => "output",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoRAConfig {
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoRAConfig {
    fn default() -> Self {
        LoRAConfig {
            rank: 4,
            alpha: 8.0,
            dropout: 0.05,
            targets: vec![LoraTarget::Query, LoraTarget::Value],
        }
    }
}

impl LoRAConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.rank == 0 {
            problems.push("rank must be at least 1".to_string());
        }
        if self.rank > 0 && !(self.scaling().is_finite() && self.scaling() > 0.0) {
            problems.push(format!(
                "scaling alpha/rank = {}/{} must be finite and positive",
                self.alpha, self.rank
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.targets.is_empty() {
            problems.push("targets must name at least one projection".into());
        }
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            problems.push("targets contain duplicates".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Every weight trains.
    Full,
    /// Frozen backbone: only LoRA pairs and the head train.
    LoraOnly,
}

#[derive(Debug, Clone)]
struct LoraPair {
    a: Tensor,
    b: Tensor,
}

#[derive(Debug, Clone)]
struct Layer {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    lora: BTreeMap<LoraTarget, LoraPair>,
}

#[derive(Debug, Clone)]
pub struct ViTLoRAModel {
    vit: ViTConfig,
    lora: Option<LoRAConfig>,
    mode: TrainMode,
    merged: bool,
    patch_w: Tensor,
    patch_b: Tensor,
    cls: Tensor,
    pos: Tensor,
    layers: Vec<Layer>,
    norm_g: Tensor,
    norm_b: Tensor,
    head_w: Tensor,
    head_b: Tensor,
}

impl ViTLoRAModel {
    /// Base weights depend only on (vit, seed): attaching adapters draws
    /// their A matrices from a separate stream, so a LoRA model shares its
    /// backbone bit-for-bit with the adapter-free model of the same seed.
    pub fn new(vit: ViTConfig, lora: Option<LoRAConfig>, seed: u64) -> Result<ViTLoRAModel> {
        vit.validate()?;
        if let Some(cfg) = &lora {
            cfg.validate()?;
        }
        let d = vit.width;
        let mut init = RngStream::for_purpose(seed, "init");
        let mut lora_init = RngStream::for_purpose(seed, "init-lora");

        let patch_w = Tensor::randn(&[d, vit.patch_dim()], INIT_STD, &mut init);
        let patch_b = Tensor::zeros(&[d]);
        let cls = Tensor::randn(&[1, d], INIT_STD, &mut init);
        let pos = Tensor::randn(&[vit.tokens(), d], INIT_STD, &mut init);

        let hidden = vit.mlp_hidden();
        let mut layers = Vec::with_capacity(vit.depth);
        for _ in 0..vit.depth {
            let mut pairs = BTreeMap::new();
            if let Some(cfg) = &lora {
                let a_std = (1.0 / cfg.rank as f32).sqrt();
                for &target in &cfg.targets {
                    pairs.insert(
                        target,
                        LoraPair {
                            a: Tensor::randn(&[cfg.rank, d], a_std, &mut lora_init),
                            b: Tensor::zeros(&[d, cfg.rank]),
                        },
                    );
                }
            }
            layers.push(Layer {
                ln1_g: Tensor::full(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                wq: Tensor::randn(&[d, d], INIT_STD, &mut init),
                bq: Tensor::zeros(&[d]),
                wk: Tensor::randn(&[d, d], INIT_STD, &mut init),
                bk: Tensor::zeros(&[d]),
                wv: Tensor::randn(&[d, d], INIT_STD, &mut init),
                bv: Tensor::zeros(&[d]),
                wo: Tensor::randn(&[d, d], INIT_STD, &mut init),
                bo: Tensor::zeros(&[d]),
                ln2_g: Tensor::full(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                w1: Tensor::randn(&[hidden, d], INIT_STD, &mut init),
                b1: Tensor::zeros(&[hidden]),
                w2: Tensor::randn(&[d, hidden], INIT_STD, &mut init),
                b2: Tensor::zeros(&[d]),
                lora: pairs,
            });
        }

        let model = ViTLoRAModel {
            vit,
            lora,
            mode: TrainMode::Full,
            merged: false,
            patch_w,
            patch_b,
            cls,
            pos,
            layers,
            norm_g: Tensor::full(&[d], 1.0),
            norm_b: Tensor::zeros(&[d]),
            head_w: Tensor::randn(&[2, d], INIT_STD, &mut init),
            head_b: Tensor::zeros(&[2]),
        };
        model.apply_trainability();
        Ok(model)
    }

    pub fn vit_config(&self) -> &ViTConfig {
        &self.vit
    }

    pub fn lora_config(&self) -> Option<&LoRAConfig> {
        self.lora.as_ref()
    }

    pub fn mode(&self) -> TrainMode {
        self.mode
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn set_mode(&mut self, mode: TrainMode) -> Result<()> {
        if mode == TrainMode::LoraOnly && self.lora.is_none() {
            return Err(Error::Contract(
                "frozen-backbone mode needs LoRA adapters".into(),
            ));
        }
        self.mode = mode;
        self.apply_trainability();
        Ok(())
    }

    /// Attach fresh adapters to an adapter-free model (e.g. one loaded from a
    /// full fine-tune checkpoint). A matrices come from the (seed,
    /// "init-lora") stream and B starts at zero, so the forward pass is
    /// unchanged until training moves B.
    pub fn attach_adapters(&mut self, lora: LoRAConfig, seed: u64) -> Result<()> {
        lora.validate()?;
        if self.lora.is_some() {
            return Err(Error::Contract("model already carries LoRA adapters".into()));
        }
        let d = self.vit.width;
        let a_std = (1.0 / lora.rank as f32).sqrt();
        let mut lora_init = RngStream::for_purpose(seed, "init-lora");
        for layer in &mut self.layers {
            for &target in &lora.targets {
                layer.lora.insert(
                    target,
                    LoraPair {
                        a: Tensor::randn(&[lora.rank, d], a_std, &mut lora_init),
                        b: Tensor::zeros(&[d, lora.rank]),
                    },
                );
            }
        }
        self.lora = Some(lora);
        self.merged = false;
        self.apply_trainability();
        Ok(())
    }

    fn backbone_parameters(&self) -> Vec<Tensor> {
        let mut out = vec![
            self.patch_w.clone(),
            self.patch_b.clone(),
            self.cls.clone(),
            self.pos.clone(),
            self.norm_g.clone(),
            self.norm_b.clone(),
        ];
        for layer in &self.layers {
            out.extend_from_slice(&[
                layer.ln1_g.clone(),
                layer.ln1_b.clone(),
                layer.wq.clone(),
                layer.bq.clone(),
                layer.wk.clone(),
                layer.bk.clone(),
                layer.wv.clone(),
                layer.bv.clone(),
                layer.wo.clone(),
                layer.bo.clone(),
                layer.ln2_g.clone(),
                layer.ln2_b.clone(),
                layer.w1.clone(),
                layer.b1.clone(),
                layer.w2.clone(),
                layer.b2.clone(),
            ]);
        }
        out
    }

    fn adapter_parameters(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for pair in layer.lora.values() {
                out.push(pair.a.clone());
                out.push(pair.b.clone());
            }
        }
        out
    }

    fn head_parameters(&self) -> Vec<Tensor> {
        vec![self.head_w.clone(), self.head_b.clone()]
    }

    fn apply_trainability(&self) {
        let backbone_trainable = self.mode == TrainMode::Full;
        for t in self.backbone_parameters() {
            t.set_requires_grad(backbone_trainable);
        }
        for t in self.adapter_parameters() {
            t.set_requires_grad(true);
        }
        for t in self.head_parameters() {
            t.set_requires_grad(true);
        }
    }

    /// Parameters the optimizer should update under the current mode.
    pub fn trainable_parameters(&self) -> Vec<Tensor> {
        let mut out = match self.mode {
            TrainMode::Full => self.backbone_parameters(),
            TrainMode::LoraOnly => Vec::new(),
        };
        out.extend(self.adapter_parameters());
        out.extend(self.head_parameters());
        out
    }

    /// All weights with stable names; sorted by name for persistence.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = vec![
            ("cls_token".into(), self.cls.clone()),
            ("head.bias".into(), self.head_b.clone()),
            ("head.weight".into(), self.head_w.clone()),
            ("norm.beta".into(), self.norm_b.clone()),
            ("norm.gamma".into(), self.norm_g.clone()),
            ("patch_embed.bias".into(), self.patch_b.clone()),
            ("patch_embed.weight".into(), self.patch_w.clone()),
            ("pos_embed".into(), self.pos.clone()),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            let p = |field: &str| format!("layers.{i:02}.{field}");
            out.push((p("attn.bk"), layer.bk.clone()));
            out.push((p("attn.bo"), layer.bo.clone()));
            out.push((p("attn.bq"), layer.bq.clone()));
            out.push((p("attn.bv"), layer.bv.clone()));
            out.push((p("attn.wk"), layer.wk.clone()));
            out.push((p("attn.wo"), layer.wo.clone()));
            out.push((p("attn.wq"), layer.wq.clone()));
            out.push((p("attn.wv"), layer.wv.clone()));
            out.push((p("ln1.beta"), layer.ln1_b.clone()));
            out.push((p("ln1.gamma"), layer.ln1_g.clone()));
            out.push((p("ln2.beta"), layer.ln2_b.clone()));
            out.push((p("ln2.gamma"), layer.ln2_g.clone()));
            for (target, pair) in &layer.lora {
                out.push((p(&format!("lora.{}.a", target.as_str())), pair.a.clone()));
                out.push((p(&format!("lora.{}.b", target.as_str())), pair.b.clone()));
            }
            out.push((p("mlp.b1"), layer.b1.clone()));
            out.push((p("mlp.b2"), layer.b2.clone()));
            out.push((p("mlp.w1"), layer.w1.clone()));
            out.push((p("mlp.w2"), layer.w2.clone()));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Patch tokens for one image: linear patch embedding, classification
    /// token prepended, positional embeddings added. [(S/p)^2 + 1, width].
    pub fn patchify(&self, graph: &mut Graph, img: &NormalizedImage) -> Result<Tensor> {
        let s = self.vit.image_size;
        if img.width != s || img.height != s {
            return Err(Error::Dim(format!(
                "input {}x{} does not match configured image size {s}",
                img.width, img.height
            )));
        }
        let p = self.vit.patch_size;
        let grid = s / p;
        let pd = self.vit.patch_dim();
        let mut patches = vec![0.0f32; grid * grid * pd];
        for gy in 0..grid {
            for gx in 0..grid {
                let row = gy * grid + gx;
                let mut k = 0;
                for c in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            let y = gy * p + py;
                            let x = gx * p + px;
                            patches[row * pd + k] = img.data[c * s * s + y * s + x];
                            k += 1;
                        }
                    }
                }
            }
        }
        let patches = Tensor::from_vec(patches, &[grid * grid, pd])?;
        let tokens = graph.linear(&patches, &self.patch_w, Some(&self.patch_b))?;
        let with_cls = graph.concat_rows(&[&self.cls, &tokens])?;
        graph.add(&with_cls, &self.pos)
    }

    fn adapted_linear(
        &self,
        graph: &mut Graph,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        pair: Option<&LoraPair>,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<Tensor> {
        let base = graph.linear(x, w, Some(b))?;
        let (Some(pair), Some(cfg)) = (pair, self.lora.as_ref()) else {
            return Ok(base);
        };
        let dropped = graph.dropout(x, cfg.dropout, rng, training)?;
        let low = graph.matmul_nt(&dropped, &pair.a)?;
        let up = graph.matmul_nt(&low, &pair.b)?;
        let scaled = graph.scale(&up, cfg.scaling());
        graph.add(&base, &scaled)
    }

    fn encode(
        &self,
        graph: &mut Graph,
        images: &[NormalizedImage],
        training: bool,
        rng: &mut RngStream,
    ) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::Contract("forward on an empty batch".into()));
        }
        let tokens: Vec<Tensor> = images
            .iter()
            .map(|img| self.patchify(graph, img))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = tokens.iter().collect();
        let mut x = graph.concat_rows(&refs)?;

        let b = images.len();
        let t = self.vit.tokens();
        let d = self.vit.width;
        let heads = self.vit.heads;
        let dh = d / heads;
        let attn_scale = 1.0 / (dh as f32).sqrt();

        for layer in &self.layers {
            let normed = graph.layer_norm(&x, &layer.ln1_g, &layer.ln1_b, LAYER_NORM_EPS)?;
            let q = self.adapted_linear(
                graph,
                &normed,
                &layer.wq,
                &layer.bq,
                layer.lora.get(&LoraTarget::Query),
                training,
                rng,
            )?;
            let k = self.adapted_linear(
                graph,
                &normed,
                &layer.wk,
                &layer.bk,
                layer.lora.get(&LoraTarget::Key),
                training,
                rng,
            )?;
            let v = self.adapted_linear(
                graph,
                &normed,
                &layer.wv,
                &layer.bv,
                layer.lora.get(&LoraTarget::Value),
                training,
                rng,
            )?;

            let mut per_image = Vec::with_capacity(b);
            for bi in 0..b {
                let mut per_head = Vec::with_capacity(heads);
                for h in 0..heads {
                    let qs = graph.block_slice(&q, bi * t, t, h * dh, dh)?;
                    let ks = graph.block_slice(&k, bi * t, t, h * dh, dh)?;
                    let vs = graph.block_slice(&v, bi * t, t, h * dh, dh)?;
                    let scores = graph.matmul_nt(&qs, &ks)?;
                    let scores = graph.scale(&scores, attn_scale);
                    let attn = graph.softmax(&scores, 1)?;
                    per_head.push(graph.matmul(&attn, &vs)?);
                }
                let refs: Vec<&Tensor> = per_head.iter().collect();
                per_image.push(graph.concat_cols(&refs)?);
            }
            let refs: Vec<&Tensor> = per_image.iter().collect();
            let mixed = graph.concat_rows(&refs)?;
            let proj = self.adapted_linear(
                graph,
                &mixed,
                &layer.wo,
                &layer.bo,
                layer.lora.get(&LoraTarget::Output),
                training,
                rng,
            )?;
            x = graph.add(&x, &proj)?;

            let normed2 = graph.layer_norm(&x, &layer.ln2_g, &layer.ln2_b, LAYER_NORM_EPS)?;
            let mid = graph.linear(&normed2, &layer.w1, Some(&layer.b1))?;
            let mid = graph.gelu(&mid);
            let mlp_out = graph.linear(&mid, &layer.w2, Some(&layer.b2))?;
            x = graph.add(&x, &mlp_out)?;
        }

        let x = graph.layer_norm(&x, &self.norm_g, &self.norm_b, LAYER_NORM_EPS)?;
        let cls_rows: Vec<Tensor> = (0..b)
            .map(|bi| graph.block_slice(&x, bi * t, 1, 0, d))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = cls_rows.iter().collect();
        graph.concat_rows(&refs)
    }

    /// Classification-token features after the final norm, [batch, width].
    pub fn forward_features(
        &self,
        graph: &mut Graph,
        images: &[NormalizedImage],
    ) -> Result<Tensor> {
        let mut unused = RngStream::for_purpose(0, "eval");
        self.encode(graph, images, false, &mut unused)
    }

    /// Logits [batch, 2]. Head dropout (p=0.5) and adapter dropout are
    /// active only when training.
    pub fn forward(
        &self,
        graph: &mut Graph,
        images: &[NormalizedImage],
        training: bool,
        rng: &mut RngStream,
    ) -> Result<Tensor> {
        let features = self.encode(graph, images, training, rng)?;
        let dropped = graph.dropout(&features, HEAD_DROPOUT, rng, training)?;
        graph.linear(&dropped, &self.head_w, Some(&self.head_b))
    }

    /// Fold W' = W + (alpha/r) B A into the base weights and drop the
    /// adapters.
    pub fn lora_merge(mut self) -> Result<ViTLoRAModel> {
        if self.merged {
            return Err(Error::Contract("adapters were already merged".into()));
        }
        let Some(cfg) = self.lora.take() else {
            return Err(Error::Contract("no adapters to merge".into()));
        };
        let scaling = cfg.scaling();
        let d = self.vit.width;
        for layer in &mut self.layers {
            let lora = std::mem::take(&mut layer.lora);
            for (target, pair) in lora {
                let w = match target {
                    LoraTarget::Query => &layer.wq,
                    LoraTarget::Key => &layer.wk,
                    LoraTarget::Value => &layer.wv,
                    LoraTarget::Output => &layer.wo,
                };
                let a = pair.a.data();
                let bm = pair.b.data();
                let mut delta = vec![0.0f32; d * d];
                for row in 0..d {
                    for r in 0..cfg.rank {
                        let brv = bm[row * cfg.rank + r];
                        if brv == 0.0 {
                            continue;
                        }
                        for col in 0..d {
                            delta[row * d + col] += brv * a[r * d + col];
                        }
                    }
                }
                let mut merged = w.to_vec();
                for (m, dlt) in merged.iter_mut().zip(&delta) {
                    *m += scaling * dlt;
                }
                w.set_data(merged)?;
            }
        }
        self.merged = true;
        self.mode = TrainMode::Full;
        self.apply_trainability();
        Ok(self)
    }

    /// Sum of trainable parameter elements under the current mode. The
    /// LoRA-only count has the closed form depth * |targets| * 2 * width * r.
    pub fn count_trainable_params(&self, include_head: bool) -> u64 {
        let mut total: u64 = self
            .trainable_parameters()
            .iter()
            .map(|t| t.numel() as u64)
            .sum();
        if !include_head {
            let head: u64 = self.head_parameters().iter().map(|t| t.numel() as u64).sum();
            total -= head;
        }
        total
    }
}

/// Closed-form LoRA parameter count: depth * |targets| * 2 * width * rank.
pub fn lora_param_count(vit: &ViTConfig, lora: &LoRAConfig) -> u64 {
    (vit.depth * lora.targets.len() * 2 * vit.width * lora.rank) as u64
}

/// Head parameter count (weights + biases) for a 2-class head.
pub fn head_param_count(vit: &ViTConfig) -> u64 {
    (2 * vit.width + 2) as u64
}

const MAGIC: &[u8; 4] = b"MTFG";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    vit: ViTConfig,
    lora: Option<LoRAConfig>,
    mode: TrainMode,
    merged: bool,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write the model as MAGIC, version, header length, JSON header
/// (name -> shape/dtype/offset/length), then little-endian f32 payload in
/// lexicographic tensor order. A config sidecar lands at `<path>.json`.
pub fn save_checkpoint(model: &ViTLoRAModel, path: &Path) -> Result<()> {
    let params = model.named_parameters();
    let mut header = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, tensor) in &params {
        let data = tensor.data();
        let offset = payload.len() as u64;
        for v in data.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        header.insert(
            name.clone(),
            TensorMeta {
                shape: tensor.shape(),
                dtype: "f32".into(),
                offset,
                length: (data.len() * 4) as u64,
            },
        );
    }
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header: {e}")))?;
    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    crate::fsutil::atomic_write(path, &bytes)?;

    let sidecar = Sidecar {
        vit: model.vit.clone(),
        lora: model.lora.clone(),
        mode: model.mode,
        merged: model.merged,
    };
    let json = serde_json::to_vec_pretty(&sidecar)
        .map_err(|e| Error::Format(format!("sidecar: {e}")))?;
    crate::fsutil::atomic_write(&sidecar_path(path), &json)
}

fn read_raw(path: &Path) -> Result<(BTreeMap<String, TensorMeta>, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 16 {
        return Err(Error::Format(format!(
            "{}: truncated before header",
            path.display()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            &bytes[0..4]
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if 16 + header_len > bytes.len() {
        return Err(Error::Format(format!(
            "{}: header length {header_len} overruns the file",
            path.display()
        )));
    }
    let header: BTreeMap<String, TensorMeta> = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::Format(format!("{}: header: {e}", path.display())))?;
    let payload = bytes[16 + header_len..].to_vec();
    for (name, meta) in &header {
        if meta.dtype != "f32" {
            return Err(Error::Format(format!(
                "tensor {name}: unsupported dtype {}",
                meta.dtype
            )));
        }
        let end = meta.offset.checked_add(meta.length);
        if meta.length % 4 != 0 || end.is_none() || end.unwrap() as usize > payload.len() {
            return Err(Error::Format(format!(
                "tensor {name}: byte range {}+{} outside payload of {} bytes",
                meta.offset,
                meta.length,
                payload.len()
            )));
        }
        let numel: usize = meta.shape.iter().product();
        if numel * 4 != meta.length as usize {
            return Err(Error::Format(format!(
                "tensor {name}: shape {:?} disagrees with byte length {}",
                meta.shape, meta.length
            )));
        }
    }
    Ok((header, payload))
}

fn fill_model(
    model: &ViTLoRAModel,
    mut header: BTreeMap<String, TensorMeta>,
    payload: &[u8],
) -> Result<()> {
    for (name, tensor) in model.named_parameters() {
        let meta = header.remove(&name).ok_or_else(|| {
            Error::Format(format!("tensor {name}: missing from checkpoint"))
        })?;
        if meta.shape != tensor.shape() {
            return Err(Error::Format(format!(
                "tensor {name}: checkpoint shape {:?} vs expected {:?}",
                meta.shape,
                tensor.shape()
            )));
        }
        let start = meta.offset as usize;
        let data: Vec<f32> = payload[start..start + meta.length as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensor.set_data(data)?;
    }
    if let Some(extra) = header.keys().next() {
        return Err(Error::Format(format!(
            "tensor {extra}: present in checkpoint but not in the model"
        )));
    }
    Ok(())
}

/// Load a checkpoint using its `<path>.json` sidecar for the architecture.
pub fn load_checkpoint(path: &Path) -> Result<ViTLoRAModel> {
    let sc_path = sidecar_path(path);
    let sc_bytes =
        std::fs::read(&sc_path).map_err(|e| Error::io(sc_path.display().to_string(), e))?;
    let sidecar: Sidecar = serde_json::from_slice(&sc_bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", sc_path.display())))?;
    let mut model = ViTLoRAModel::new(sidecar.vit, sidecar.lora, 0)?;
    model.merged = sidecar.merged;
    let (header, payload) = read_raw(path)?;
    fill_model(&model, header, &payload)?;
    model.set_mode(sidecar.mode)?;
    Ok(model)
}

/// Load a checkpoint into an explicitly expected architecture, ignoring the
/// sidecar; the first tensor whose shape disagrees is named in the error.
pub fn load_checkpoint_expecting(
    path: &Path,
    vit: ViTConfig,
    lora: Option<LoRAConfig>,
) -> Result<ViTLoRAModel> {
    let model = ViTLoRAModel::new(vit, lora, 0)?;
    let (header, payload) = read_raw(path)?;
    fill_model(&model, header, &payload)?;
    Ok(model)
}

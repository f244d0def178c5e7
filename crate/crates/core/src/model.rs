//! The full model: frozen encoders, projections, fusion transformer and the
//! promptable segmenter, all in one parameter store.

use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::VideoSample;
use crate::encoders::{encode_sample, encoder_specs, projection_specs, EncodedInputs};
use crate::error::{Result, SlvError};
use crate::fusion::{fuse_encoded, fusion_specs};
use crate::params::{FreezePolicy, Graph, ParamSpec, ParamStore};
use crate::segmenter::{encode_frames, mask_decode, prompt_encode, propagate_video, segmenter_specs, MaskPrediction};
use crate::tensor::{Tensor, Var};

/// Seed of the segmenter weights. They play the part of pretrained weights,
/// so they do not depend on the training seed.
pub const SEGMENTER_SEED: u64 = 0x5A2_0000;

/// Parameter groups that are never trained.
pub const ALWAYS_FROZEN: [&str; 5] = ["enc.", "seg.enc.", "seg.mem.", "tok.aud", "tok.vis"];

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub params: ParamStore,
}

/// Cached outputs of every frozen module for one sample.
#[derive(Clone, Debug)]
pub struct SampleFeatures {
    pub id: String,
    pub encoded: EncodedInputs,
    /// Unconditioned frame embeddings `[h*w, d_s]`, one per frame.
    pub frame_embs: Vec<Tensor>,
    /// Ground truth per frame, `H*W` values of 0/1.
    pub masks: Vec<Vec<u8>>,
}

impl SampleFeatures {
    pub fn num_frames(&self) -> usize {
        self.frame_embs.len()
    }
}

fn all_specs(cfg: &RunConfig) -> (Vec<ParamSpec>, Vec<ParamSpec>, Vec<ParamSpec>) {
    let mut trainable = projection_specs(cfg);
    trainable.extend(fusion_specs(&cfg.fusion));
    (encoder_specs(cfg), segmenter_specs(cfg), trainable)
}

impl Model {
    pub fn init(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let (enc, seg, rest) = all_specs(&config);
        let mut params = ParamStore::new();
        params.init_group(&enc, config.encoders.backbone.seed());
        params.init_group(&seg, SEGMENTER_SEED);
        params.init_group(&rest, config.train.seed);
        Ok(Self { config, params })
    }

    /// Freeze policy implied by the config.
    pub fn policy(&self) -> FreezePolicy {
        let mut frozen: Vec<&str> = ALWAYS_FROZEN.to_vec();
        if !self.config.seg.train_prompt_encoder {
            frozen.push("seg.prompt.");
        }
        if !self.config.seg.train_mask_decoder {
            frozen.push("seg.dec.");
        }
        FreezePolicy::new(frozen)
    }

    pub fn features(&self, sample: &VideoSample) -> Result<SampleFeatures> {
        let encoded = encode_sample(&self.params, &self.config, sample)?;
        let frame_embs = encode_frames(&self.params, &self.config, sample)?;
        let masks = (0..sample.num_frames).map(|i| sample.mask(i).to_vec()).collect();
        Ok(SampleFeatures {
            id: sample.id.clone(),
            encoded,
            frame_embs,
            masks,
        })
    }

    /// Training-time path: fuse the whole video, prompt frame 0, decode it.
    pub fn first_frame_logits(&self, g: &mut Graph, feats: &SampleFeatures) -> Result<Var> {
        let prompt = fuse_encoded(g, &self.config, &feats.encoded)?;
        let tokens = prompt_encode(g, prompt)?;
        let emb = g.input(feats.frame_embs[0].clone());
        Ok(mask_decode(g, &self.config, emb, tokens)?.logits)
    }

    /// The `[n_seg, d]` prompt embedding of a sample.
    pub fn prompt(&self, feats: &SampleFeatures) -> Result<Tensor> {
        let frozen = FreezePolicy::new([""]);
        let mut g = Graph::new(&self.params, &frozen);
        let p = fuse_encoded(&mut g, &self.config, &feats.encoded)?;
        Ok(g.value(p).clone())
    }

    /// Full-video inference.
    pub fn predict(&self, feats: &SampleFeatures) -> Result<Vec<MaskPrediction>> {
        let prompt = self.prompt(feats)?;
        propagate_video(&self.params, &self.config, &feats.frame_embs, &prompt)
    }

    /// Replaces parameters with checkpoint values after checking that names
    /// and shapes match this architecture exactly.
    pub fn load_params(&mut self, tensors: impl IntoIterator<Item = (String, Tensor)>, path: &Path) -> Result<()> {
        let mut seen = 0;
        for (name, t) in tensors {
            let cur = self
                .params
                .get(&name)
                .map_err(|_| SlvError::load(path, format!("unexpected parameter {name}")))?;
            if cur.shape() != t.shape() {
                return Err(SlvError::load(
                    path,
                    format!("{name} has shape {:?}, expected {:?}", t.shape(), cur.shape()),
                ));
            }
            self.params.insert(name, t);
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(SlvError::load(
                path,
                format!("checkpoint holds {seen} of {} parameters", self.params.len()),
            ));
        }
        Ok(())
    }

    /// Loads a model checkpoint written by the trainer: the config from the
    /// sidecar `<path>.json`, the weights from the SLV1 file.
    pub fn load(path: &Path) -> Result<Self> {
        let config = RunConfig::load(&config_sidecar(path))?;
        let mut model = Self::init(config)?;
        let params = checkpoint::load(path)?
            .into_iter()
            .filter(|(n, _)| !n.starts_with("opt."));
        model.load_params(params, path)?;
        Ok(model)
    }
}

/// `m.slv1` -> `m.slv1.json`.
pub fn config_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

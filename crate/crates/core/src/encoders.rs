//! Frozen synthetic modality encoders and the trainable projection MLPs.
//!
//! Encoder parameters live under `enc.*` and are drawn from the backbone
//! seed; projections live under `proj.*`.

use crate::config::RunConfig;
use crate::data::{VideoSample, VOCABULARY};
use crate::error::{contract, Result};
use crate::nn::{self, block_specs, layer_norm_specs, linear_specs, mlp_specs};
use crate::params::{FreezePolicy, Graph, Init, ParamSpec, ParamStore};
use crate::tensor::{Tensor, Var};

const VISUAL_BLOCKS: usize = 2;
const TEXT_BLOCKS: usize = 1;

pub fn encoder_specs(cfg: &RunConfig) -> Vec<ParamSpec> {
    let e = &cfg.encoders;
    let (gh, gw) = cfg.visual_grid();
    let mut specs = linear_specs("enc.audio.lin", cfg.data.audio_bins, e.audio_dim, 1.0);
    specs.extend(layer_norm_specs("enc.audio.ln", e.audio_dim));

    let patch_in = 3 * e.patch * e.patch;
    specs.extend(linear_specs("enc.visual.patch", patch_in, e.visual_dim, 1.0));
    specs.push(ParamSpec::new("enc.visual.pos", &[gh * gw, e.visual_dim], Init::Normal(0.5)));
    specs.push(ParamSpec::new("enc.visual.cls", &[1, e.visual_dim], Init::Normal(1.0)));
    for b in 0..VISUAL_BLOCKS {
        specs.extend(block_specs(&format!("enc.visual.blk{b}"), e.visual_dim, 4, 1.0));
    }

    specs.push(ParamSpec::new("enc.text.emb", &[VOCABULARY.len(), e.text_dim], Init::Normal(1.0)));
    specs.push(ParamSpec::new("enc.text.pos", &[cfg.data.max_tokens, e.text_dim], Init::Normal(0.5)));
    for b in 0..TEXT_BLOCKS {
        specs.extend(block_specs(&format!("enc.text.blk{b}"), e.text_dim, 4, 1.0));
    }
    specs
}

/// One `Linear -> ReLU -> Linear` per modality, hidden width `2d`.
pub fn projection_specs(cfg: &RunConfig) -> Vec<ParamSpec> {
    let e = &cfg.encoders;
    let d = cfg.fusion.dim;
    let mut specs = mlp_specs("proj.audio", e.audio_dim, 2 * d, d, 1.0);
    specs.extend(mlp_specs("proj.visual", e.visual_dim, 2 * d, d, 1.0));
    specs.extend(mlp_specs("proj.text", e.text_dim, 2 * d, d, 1.0));
    specs
}

/// `[N, bins]` spectral descriptors -> `[N, d_A]`.
pub fn encode_audio(g: &mut Graph, audio: &Tensor) -> Result<Var> {
    let x = g.input(audio.clone());
    let h = nn::linear(g, "enc.audio.lin", x)?;
    nn::layer_norm(g, "enc.audio.ln", h)
}

/// Splits a `3 x H x W` frame into `[(H/p)*(W/p), 3*p*p]` patch rows
/// (row-major over the grid, channel-major inside a patch).
pub fn patchify(frame: &[f32], height: usize, width: usize, patch: usize) -> Result<Tensor> {
    if frame.len() != 3 * height * width || height % patch != 0 || width % patch != 0 {
        return Err(contract(format!(
            "frame of {} values does not match 3x{height}x{width} with patch {patch}",
            frame.len()
        )));
    }
    let (gh, gw) = (height / patch, width / patch);
    let mut data = Vec::with_capacity(frame.len());
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..3 {
                for y in 0..patch {
                    let row = c * height * width + (py * patch + y) * width + px * patch;
                    data.extend(frame[row..row + patch].iter().map(|&v| f64::from(v)));
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, 3 * patch * patch], data)
}

/// One frame -> `[1 + h*w, d_V]`; row 0 is the frame's cls token.
pub fn encode_frame(g: &mut Graph, cfg: &RunConfig, frame: &[f32]) -> Result<Var> {
    let heads = cfg.encoders.heads;
    let patches = patchify(frame, cfg.data.height, cfg.data.width, cfg.encoders.patch)?;
    let x = g.input(patches);
    let h = nn::linear(g, "enc.visual.patch", x)?;
    let pos = g.param("enc.visual.pos")?;
    let h = g.add(h, pos)?;
    let cls = g.param("enc.visual.cls")?;
    let mut z = g.concat(&[cls, h], 0)?;
    for b in 0..VISUAL_BLOCKS {
        z = nn::transformer_block(g, &format!("enc.visual.blk{b}"), z, heads)?;
    }
    Ok(z)
}

/// Token ids -> `[P, d_T]`.
pub fn encode_text(g: &mut Graph, cfg: &RunConfig, tokens: &[usize]) -> Result<Var> {
    if tokens.is_empty() || tokens.len() > cfg.data.max_tokens {
        return Err(contract(format!(
            "expression has {} tokens, expected 1..={}",
            tokens.len(),
            cfg.data.max_tokens
        )));
    }
    let table = g.param("enc.text.emb")?;
    let e = g.embedding(table, tokens)?;
    let pos = g.param("enc.text.pos")?;
    let pos = g.slice(pos, 0, 0, tokens.len())?;
    let mut z = g.add(e, pos)?;
    for b in 0..TEXT_BLOCKS {
        z = nn::transformer_block(g, &format!("enc.text.blk{b}"), z, cfg.encoders.heads)?;
    }
    Ok(z)
}

/// Frozen encoder outputs of one sample. They never change during training,
/// so they are computed once and reused.
#[derive(Clone, Debug)]
pub struct EncodedInputs {
    /// `[N, d_A]`
    pub audio: Tensor,
    /// `[P, d_T]`
    pub text: Tensor,
    /// Per frame `[h*w, d_V]`.
    pub patches: Vec<Tensor>,
    /// `[N, d_V]`, one global token per frame.
    pub cls: Tensor,
}

impl EncodedInputs {
    pub fn num_frames(&self) -> usize {
        self.patches.len()
    }
}

pub fn check_geometry(cfg: &RunConfig, sample: &VideoSample) -> Result<()> {
    let d = &cfg.data;
    if sample.height != d.height || sample.width != d.width || sample.audio_bins != d.audio_bins {
        return Err(contract(format!(
            "sample {} is {}x{} with {} audio bins, model expects {}x{} with {}",
            sample.id, sample.height, sample.width, sample.audio_bins, d.height, d.width, d.audio_bins
        )));
    }
    if sample.num_frames == 0 {
        return Err(contract(format!("sample {} has no frames", sample.id)));
    }
    Ok(())
}

/// Runs the three frozen encoders on one sample.
pub fn encode_sample(params: &ParamStore, cfg: &RunConfig, sample: &VideoSample) -> Result<EncodedInputs> {
    check_geometry(cfg, sample)?;
    let frozen = FreezePolicy::new([""]);
    let mut g = Graph::new(params, &frozen);
    let n = sample.num_frames;
    let audio_in = Tensor::new(
        vec![n, sample.audio_bins],
        sample.audio.iter().map(|&v| f64::from(v)).collect(),
    )?;
    let audio = encode_audio(&mut g, &audio_in)?;
    let text = encode_text(&mut g, cfg, &sample.tokens)?;
    let d_v = cfg.encoders.visual_dim;
    let mut patches = Vec::with_capacity(n);
    let mut cls = Vec::with_capacity(n * d_v);
    for i in 0..n {
        let z = encode_frame(&mut g, cfg, sample.frame(i))?;
        let value = g.value(z);
        cls.extend_from_slice(value.row(0));
        let rows = value.rows();
        patches.push(Tensor::new(vec![rows - 1, d_v], value.data()[d_v..].to_vec())?);
    }
    Ok(EncodedInputs {
        audio: g.value(audio).clone(),
        text: g.value(text).clone(),
        patches,
        cls: Tensor::new(vec![n, d_v], cls)?,
    })
}

/// `Linear(ReLU(Linear(x)))` with the `proj.<modality>` weights.
pub fn project(g: &mut Graph, modality: &str, x: Var) -> Result<Var> {
    let prefix = format!("proj.{modality}");
    let w = g.params().get(&format!("{prefix}.fc1.w"))?;
    let d_in = w.shape()[0];
    if g.shape(x).len() != 2 || g.shape(x)[1] != d_in {
        return Err(contract(format!(
            "{prefix} expects rows of width {d_in}, got {:?}",
            g.shape(x)
        )));
    }
    nn::mlp(g, &prefix, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Backbone;
    use crate::data::{generate_scene, GenConfig, Split};
    use crate::tensor::gradcheck::{check_fn, uniform};

    fn encoders(cfg: &RunConfig) -> ParamStore {
        let mut s = ParamStore::new();
        s.init_group(&encoder_specs(cfg), cfg.encoders.backbone.seed());
        s
    }

    #[test]
    fn frame_features_have_grid_shape() {
        let cfg = RunConfig::default();
        let sample = generate_scene(7, &GenConfig::default(), Split::Train).unwrap();
        let enc = encode_sample(&encoders(&cfg), &cfg, &sample).unwrap();
        assert_eq!(enc.patches.len(), 8);
        assert_eq!(enc.patches[0].shape(), &[64, 64]);
        assert_eq!(enc.cls.shape(), &[8, 64]);
        assert_eq!(enc.audio.shape(), &[8, 16]);
        assert_eq!(enc.text.shape(), &[sample.tokens.len(), 32]);
    }

    #[test]
    fn backbones_differ() {
        let mut cfg = RunConfig::default();
        let sample = generate_scene(3, &GenConfig::default(), Split::Train).unwrap();
        let a = encode_sample(&encoders(&cfg), &cfg, &sample).unwrap();
        cfg.encoders.backbone = Backbone::B;
        let b = encode_sample(&encoders(&cfg), &cfg, &sample).unwrap();
        assert!(a.cls.max_abs_diff(&b.cls) > 1e-3);
        assert!(a.text.max_abs_diff(&b.text) > 1e-3);
    }

    #[test]
    fn encoders_are_pure() {
        let cfg = RunConfig::default();
        let sample = generate_scene(5, &GenConfig::default(), Split::Train).unwrap();
        let p = encoders(&cfg);
        let a = encode_sample(&p, &cfg, &sample).unwrap();
        let b = encode_sample(&p, &cfg, &sample).unwrap();
        assert!(a.cls.bits_eq(&b.cls) && a.audio.bits_eq(&b.audio) && a.patches[3].bits_eq(&b.patches[3]));
    }

    #[test]
    fn out_of_vocabulary_id_is_an_input_error() {
        let cfg = RunConfig::default();
        let p = encoders(&cfg);
        let policy = FreezePolicy::new([""]);
        let mut g = Graph::new(&p, &policy);
        let err = encode_text(&mut g, &cfg, &[1, VOCABULARY.len()]).unwrap_err();
        assert!(matches!(err, crate::SlvError::Input(_)), "{err}");
    }

    fn identity_projection() -> ParamStore {
        let mut s = ParamStore::new();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        s.insert("proj.t.fc1.w", eye.clone());
        s.insert("proj.t.fc2.w", eye);
        s.insert("proj.t.fc1.b", Tensor::zeros(&[2]));
        s.insert("proj.t.fc2.b", Tensor::zeros(&[2]));
        s
    }

    #[test]
    fn identity_projection_applies_relu() {
        let s = identity_projection();
        let policy = FreezePolicy::all_trainable();
        let mut g = Graph::new(&s, &policy);
        let x = g.input(Tensor::new(vec![2, 2], vec![-1.0, 2.0, 0.0, 0.0]).unwrap());
        let y = project(&mut g, "t", x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn projection_width_mismatch_is_a_contract_error() {
        let s = identity_projection();
        let policy = FreezePolicy::all_trainable();
        let mut g = Graph::new(&s, &policy);
        let x = g.input(Tensor::zeros(&[1, 3]));
        assert!(matches!(project(&mut g, "t", x), Err(crate::SlvError::Contract(_))));
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let inputs = vec![
            uniform(&[5, 3], -2.0, 2.0, 1),
            uniform(&[3, 6], -1.0, 1.0, 2),
            uniform(&[6], -0.5, 0.5, 3),
            uniform(&[6, 4], -1.0, 1.0, 4),
            uniform(&[4], -0.5, 0.5, 5),
        ];
        let out = check_fn(&inputs, None, |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_bias(h, v[2])?;
            let h = t.relu(h);
            let h = t.matmul(h, v[3])?;
            let y = t.add_bias(h, v[4])?;
            Ok(crate::tensor::gradcheck::random_projection(t, y, 11)?)
        })
        .unwrap();
        assert!(out.passed(), "{:?}", out.per_input);
    }
}

//! Bidirectional fusion transformer with `[seg]` token propagation and
//! `[his]` accumulation.
//!
//! Step `i` sees the sequence
//!
//! ```text
//! seg (n_seg rows) | audio (N rows) | aud | text (P rows) | vis | patches of frame i (h*w rows) | his (i rows)
//! ```
//!
//! and the first `n_seg` output rows become the next `seg`. `his` holds the
//! projected cls tokens of frames `0..i`; the cls of frame `i` is appended
//! after the step.

use crate::config::{FusionConfig, FusionStrategy, RunConfig};
use crate::encoders::{project, EncodedInputs};
use crate::error::{contract, Result};
use crate::nn::{self, block_specs};
use crate::params::{Graph, Init, ParamSpec};
use crate::tensor::Var;

pub fn fusion_specs(cfg: &FusionConfig) -> Vec<ParamSpec> {
    let d = cfg.dim;
    let mut specs = vec![
        ParamSpec::new("tok.seg", &[cfg.n_seg, d], Init::Normal(0.02)),
        ParamSpec::new("tok.aud", &[d], Init::Normal(1.0)),
        ParamSpec::new("tok.vis", &[d], Init::Normal(1.0)),
    ];
    for l in 0..cfg.layers {
        specs.extend(block_specs(&format!("fuse.blk{l}"), d, 4, 1.0));
    }
    specs
}

/// Projected per-sample features, all of width `d`.
#[derive(Clone, Debug)]
pub struct ProjectedInputs {
    /// `[N, d]`
    pub audio: Var,
    /// `[P, d]`
    pub text: Var,
    /// Per frame `[h*w, d]`.
    pub frames: Vec<Var>,
    /// Per frame `[1, d]`.
    pub cls: Vec<Var>,
}

impl ProjectedInputs {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

pub fn project_inputs(g: &mut Graph, enc: &EncodedInputs) -> Result<ProjectedInputs> {
    let a = g.input(enc.audio.clone());
    let audio = project(g, "audio", a)?;
    let t = g.input(enc.text.clone());
    let text = project(g, "text", t)?;
    let mut frames = Vec::with_capacity(enc.num_frames());
    for p in &enc.patches {
        let x = g.input(p.clone());
        frames.push(project(g, "visual", x)?);
    }
    let c = g.input(enc.cls.clone());
    let cls_all = project(g, "visual", c)?;
    let cls = (0..enc.num_frames())
        .map(|i| g.slice(cls_all, 0, i, 1))
        .collect::<Result<_>>()?;
    Ok(ProjectedInputs { audio, text, frames, cls })
}

/// Propagation state: current `[seg]` rows and the `[his]` buffer.
#[derive(Clone, Debug)]
pub struct FusionState {
    pub seg: Var,
    pub his: Vec<Var>,
}

impl FusionState {
    pub fn initial(g: &mut Graph) -> Result<Self> {
        Ok(Self {
            seg: g.param("tok.seg")?,
            his: Vec::new(),
        })
    }

    /// Index of the frame the next step must consume.
    pub fn next_frame(&self) -> usize {
        self.his.len()
    }
}

fn sentinel(g: &mut Graph, name: &str) -> Result<Var> {
    let t = g.param(name)?;
    let d = g.shape(t)[0];
    g.reshape(t, &[1, d])
}

/// Sequence length of a step input.
pub fn sequence_len(n_seg: usize, n_audio: usize, n_text: usize, n_patches: usize, n_his: usize) -> usize {
    n_seg + n_audio + 1 + n_text + 1 + n_patches + n_his
}

/// Builds the step-`frame` input sequence.
pub fn assemble_sequence(g: &mut Graph, state: &FusionState, inputs: &ProjectedInputs, frame: usize) -> Result<Var> {
    let patches = *inputs
        .frames
        .get(frame)
        .ok_or_else(|| contract(format!("frame {frame} out of range for {} frames", inputs.num_frames())))?;
    let aud = sentinel(g, "tok.aud")?;
    let vis = sentinel(g, "tok.vis")?;
    let mut parts = vec![state.seg, inputs.audio, aud, inputs.text, vis, patches];
    parts.extend_from_slice(&state.his);
    let d = g.shape(state.seg)[1];
    if let Some(bad) = parts.iter().find(|v| g.shape(**v)[1] != d) {
        return Err(contract(format!(
            "sequence part of shape {:?} does not have width {d}",
            g.shape(*bad)
        )));
    }
    g.concat(&parts, 0)
}

fn run_blocks(g: &mut Graph, cfg: &FusionConfig, mut z: Var) -> Result<Var> {
    for l in 0..cfg.layers {
        z = nn::transformer_block(g, &format!("fuse.blk{l}"), z, cfg.heads)?;
    }
    Ok(z)
}

/// Runs one propagation step on `frame`, which must be `state.next_frame()`.
pub fn propagate_step(
    g: &mut Graph,
    cfg: &FusionConfig,
    state: &FusionState,
    inputs: &ProjectedInputs,
    frame: usize,
) -> Result<FusionState> {
    if frame != state.next_frame() {
        return Err(contract(format!(
            "propagation expected frame {}, got {frame}",
            state.next_frame()
        )));
    }
    let z = assemble_sequence(g, state, inputs, frame)?;
    let out = run_blocks(g, cfg, z)?;
    let seg = g.slice(out, 0, 0, cfg.n_seg)?;
    let mut his = state.his.clone();
    his.push(inputs.cls[frame]);
    Ok(FusionState { seg, his })
}

/// Produces the `[n_seg, d]` prompt embedding for the whole video.
pub fn fuse_video(g: &mut Graph, cfg: &FusionConfig, inputs: &ProjectedInputs) -> Result<Var> {
    let n = inputs.num_frames();
    if n == 0 {
        return Err(contract("fuse_video needs at least one frame"));
    }
    match cfg.strategy {
        FusionStrategy::LearnableToken => {
            let mut state = FusionState::initial(g)?;
            for i in 0..n {
                state = propagate_step(g, cfg, &state, inputs, i)?;
            }
            Ok(state.seg)
        }
        FusionStrategy::Mean => {
            let seg = g.param("tok.seg")?;
            let aud = sentinel(g, "tok.aud")?;
            let vis = sentinel(g, "tok.vis")?;
            let mut parts = vec![seg, inputs.audio, aud, inputs.text, vis];
            parts.extend_from_slice(&inputs.frames);
            let z = g.concat(&parts, 0)?;
            let out = run_blocks(g, cfg, z)?;
            let m = g.mean(out, 0)?;
            let m = g.reshape(m, &[1, cfg.dim])?;
            if cfg.n_seg == 1 {
                Ok(m)
            } else {
                g.concat(&vec![m; cfg.n_seg], 0)
            }
        }
    }
}

/// Convenience: project the cached encoder outputs and fuse them.
pub fn fuse_encoded(g: &mut Graph, cfg: &RunConfig, enc: &EncodedInputs) -> Result<Var> {
    let inputs = project_inputs(g, enc)?;
    fuse_video(g, &cfg.fusion, &inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{FreezePolicy, ParamStore};
    use crate::tensor::gradcheck::uniform;
    use crate::tensor::Tensor;

    fn toy(cfg: &FusionConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        s.init_group(&fusion_specs(cfg), seed);
        s
    }

    fn toy_inputs(g: &mut Graph, d: usize, n: usize, p: usize, hw: usize, seed: u64) -> ProjectedInputs {
        let audio = g.input(uniform(&[n, d], -1.0, 1.0, seed));
        let text = g.input(uniform(&[p, d], -1.0, 1.0, seed + 1));
        let frames = (0..n)
            .map(|i| g.input(uniform(&[hw, d], -1.0, 1.0, seed + 10 + i as u64)))
            .collect();
        let cls = (0..n)
            .map(|i| g.input(uniform(&[1, d], -1.0, 1.0, seed + 100 + i as u64)))
            .collect();
        ProjectedInputs { audio, text, frames, cls }
    }

    fn cfg(d: usize, layers: usize, n_seg: usize) -> FusionConfig {
        FusionConfig {
            layers,
            dim: d,
            heads: 2,
            n_seg,
            strategy: FusionStrategy::LearnableToken,
        }
    }

    #[test]
    fn sequence_layout_and_length() {
        let c = cfg(8, 1, 1);
        let store = toy(&c, 1);
        let policy = FreezePolicy::all_trainable();
        let mut g = Graph::new(&store, &policy);
        let inputs = toy_inputs(&mut g, 8, 8, 5, 64, 3);
        let mut state = FusionState::initial(&mut g).unwrap();
        for i in 0..3 {
            state = propagate_step(&mut g, &c, &state, &inputs, i).unwrap();
        }
        assert_eq!(state.his.len(), 3);
        let z = assemble_sequence(&mut g, &state, &inputs, 3).unwrap();
        assert_eq!(g.shape(z), &[83, 8]);
        assert_eq!(sequence_len(1, 8, 5, 64, 3), 83);
        let zv = g.value(z).clone();
        assert_eq!(zv.row(0), g.value(state.seg).row(0));
        assert_eq!(zv.row(9), store.get("tok.aud").unwrap().data());
        assert_eq!(zv.row(9 + 1 + 5), store.get("tok.vis").unwrap().data());
        assert_eq!(zv.row(82), g.value(inputs.cls[2]).row(0));
    }

    #[test]
    fn skipping_a_frame_is_rejected() {
        let c = cfg(8, 1, 1);
        let store = toy(&c, 1);
        let policy = FreezePolicy::all_trainable();
        let mut g = Graph::new(&store, &policy);
        let inputs = toy_inputs(&mut g, 8, 3, 2, 4, 3);
        let s0 = FusionState::initial(&mut g).unwrap();
        assert!(propagate_step(&mut g, &c, &s0, &inputs, 1).is_err());
    }

    #[test]
    fn mean_mode_shape_replicates_rows() {
        let mut c = cfg(8, 1, 4);
        c.strategy = FusionStrategy::Mean;
        let store = toy(&c, 2);
        let policy = FreezePolicy::all_trainable();
        let mut g = Graph::new(&store, &policy);
        let inputs = toy_inputs(&mut g, 8, 3, 2, 4, 5);
        let out = fuse_video(&mut g, &c, &inputs).unwrap();
        assert_eq!(g.shape(out), &[4, 8]);
        let v = g.value(out);
        assert_eq!(v.row(0), v.row(3));
    }

    #[test]
    fn single_frame_video_is_one_step() {
        let c = cfg(8, 2, 2);
        let store = toy(&c, 4);
        let policy = FreezePolicy::all_trainable();
        let mut g = Graph::new(&store, &policy);
        let inputs = toy_inputs(&mut g, 8, 1, 3, 4, 9);
        let fused = fuse_video(&mut g, &c, &inputs).unwrap();
        let s0 = FusionState::initial(&mut g).unwrap();
        let s1 = propagate_step(&mut g, &c, &s0, &inputs, 0).unwrap();
        assert!(g.value(fused).bits_eq(g.value(s1.seg)));
    }

    #[test]
    fn seg_after_step_ignores_later_frames() {
        let c = cfg(8, 1, 1);
        let store = toy(&c, 6);
        let policy = FreezePolicy::all_trainable();
        let run = |bump: f64| {
            let mut g = Graph::new(&store, &policy);
            let mut inputs = toy_inputs(&mut g, 8, 4, 2, 4, 1);
            let mut f2 = g.value(inputs.frames[2]).clone();
            f2.data_mut()[0] += bump;
            inputs.frames[2] = g.input(f2);
            let mut c2 = g.value(inputs.cls[2]).clone();
            c2.data_mut()[1] -= bump;
            inputs.cls[2] = g.input(c2);
            let mut s = FusionState::initial(&mut g).unwrap();
            let mut segs = Vec::new();
            for i in 0..4 {
                s = propagate_step(&mut g, &c, &s, &inputs, i).unwrap();
                segs.push(g.value(s.seg).clone());
            }
            segs
        };
        let a = run(0.0);
        let b = run(0.7);
        assert!(a[0].bits_eq(&b[0]) && a[1].bits_eq(&b[1]));
        assert!(!a[2].bits_eq(&b[2]));
    }

    #[test]
    fn singleton_attention_weight_is_one() {
        let c = cfg(8, 1, 1);
        let store = toy(&c, 8);
        let policy = FreezePolicy::all_trainable();
        let mut g = Graph::new(&store, &policy);
        let x = g.input(uniform(&[1, 8], -1.0, 1.0, 2));
        let (y, w) = nn::transformer_block_traced(&mut g, "fuse.blk0", x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 8]);
        for wh in w {
            assert_eq!(g.value(wh).data(), &[1.0]);
        }
        let x4 = g.input(Tensor::zeros(&[4, 8]));
        let y4 = nn::transformer_block(&mut g, "fuse.blk0", x4, 2).unwrap();
        assert_eq!(g.shape(y4), &[4, 8]);
    }
}

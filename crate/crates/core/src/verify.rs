//! Finite-difference gradient suites at toy dimensions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::config::{FusionConfig, FusionStrategy, RunConfig};
use crate::data::{generate_scene_with, GenConfig, Split, TemplateKind};
use crate::error::{Result, SlvError};
use crate::fusion::{fuse_video, fusion_specs, ProjectedInputs};
use crate::model::Model;
use crate::params::{FreezePolicy, Graph, ParamStore};
use crate::segmenter::{mask_decode, prompt_encode, segmenter_specs};
use crate::tensor::gradcheck::{check_fn, random_projection, relative_error, uniform, FD_STEP, REL_ERR_TOL};
use crate::tensor::{OpKind, Tape, Tensor, Var};
use crate::train::{mask_loss, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Fusion,
    Decoder,
    End2End,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Ops, Scope::Fusion, Scope::Decoder, Scope::End2End];
}

impl FromStr for Scope {
    type Err = SlvError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ops" => Scope::Ops,
            "fusion" => Scope::Fusion,
            "decoder" => Scope::Decoder,
            "end2end" => Scope::End2End,
            other => return Err(SlvError::Config(format!("unknown gradcheck scope {other:?}"))),
        })
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Fusion => "fusion",
            Scope::Decoder => "decoder",
            Scope::End2End => "end2end",
        })
    }
}

/// Max relative error of one op or parameter group.
#[derive(Clone, Debug)]
pub struct GroupResult {
    pub name: String,
    pub max_rel_err: f64,
}

impl GroupResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_ERR_TOL
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub scope: Scope,
    pub groups: Vec<GroupResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupResult> {
        self.groups.iter().filter(|g| !g.passed())
    }
}

pub fn run(scope: Scope, fault: Option<OpKind>) -> Result<SuiteReport> {
    let groups = match scope {
        Scope::Ops => ops_suite(fault)?,
        Scope::Fusion => fusion_suite(fault)?,
        Scope::Decoder => decoder_suite(fault)?,
        Scope::End2End => end2end_suite(fault)?,
    };
    Ok(SuiteReport { scope, groups })
}

type OpCase = (OpKind, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn ops_cases() -> Vec<OpCase> {
    let u = |shape: &[usize], seed: u64| uniform(shape, -2.0, 2.0, seed);
    let proj = |t: &mut Tape, v: Var| random_projection(t, v, 99);
    let target: Vec<f64> = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    let target2 = target.clone();
    vec![
        (OpKind::MatMul, vec![u(&[3, 4], 1), u(&[4, 2], 2)], Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            proj(t, y)
        })),
        (OpKind::Add, vec![u(&[2, 3], 3), u(&[2, 3], 4)], Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            proj(t, y)
        })),
        (OpKind::AddBias, vec![u(&[3, 4], 5), u(&[4], 6)], Box::new(move |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            proj(t, y)
        })),
        (OpKind::Mul, vec![u(&[2, 3], 7), u(&[2, 3], 8)], Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            proj(t, y)
        })),
        (OpKind::Scale, vec![u(&[5], 9)], Box::new(move |t, v| {
            let y = t.scale(v[0], -1.7);
            proj(t, y)
        })),
        (OpKind::Relu, vec![u(&[3, 4], 10)], Box::new(move |t, v| {
            let y = t.relu(v[0]);
            proj(t, y)
        })),
        (OpKind::Sigmoid, vec![u(&[3, 4], 11)], Box::new(move |t, v| {
            let y = t.sigmoid(v[0]);
            proj(t, y)
        })),
        (OpKind::Softmax, vec![u(&[3, 5], 12)], Box::new(move |t, v| {
            let y = t.softmax(v[0]);
            proj(t, y)
        })),
        (OpKind::LayerNorm, vec![u(&[3, 4], 13), u(&[4], 14), u(&[4], 15)], Box::new(move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            proj(t, y)
        })),
        (OpKind::Concat, vec![u(&[2, 3], 16), u(&[2, 2], 17)], Box::new(move |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            proj(t, y)
        })),
        (OpKind::Slice, vec![u(&[4, 3], 18)], Box::new(move |t, v| {
            let y = t.slice(v[0], 0, 1, 2)?;
            proj(t, y)
        })),
        (OpKind::Mean, vec![u(&[2, 3, 4], 19)], Box::new(move |t, v| {
            let y = t.mean(v[0], 1)?;
            proj(t, y)
        })),
        (OpKind::Sum, vec![u(&[3, 2], 20)], Box::new(|t, v| Ok(t.sum(v[0])))),
        (OpKind::Transpose, vec![u(&[3, 4], 21)], Box::new(move |t, v| {
            let y = t.transpose(v[0])?;
            proj(t, y)
        })),
        (OpKind::Reshape, vec![u(&[2, 6], 22)], Box::new(move |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            proj(t, y)
        })),
        (OpKind::Embedding, vec![u(&[5, 3], 23)], Box::new(move |t, v| {
            let y = t.embedding(v[0], &[0, 3, 3, 1])?;
            proj(t, y)
        })),
        (OpKind::AvgPool2x, vec![u(&[4, 4, 2], 24)], Box::new(move |t, v| {
            let y = t.avg_pool2x(v[0])?;
            proj(t, y)
        })),
        (OpKind::Upsample, vec![u(&[2, 3, 2], 25)], Box::new(move |t, v| {
            let y = t.upsample_bilinear(v[0], 5, 4)?;
            proj(t, y)
        })),
        (OpKind::BceWithLogits, vec![u(&[6], 26)], Box::new(move |t, v| t.bce_with_logits(v[0], &target))),
        (OpKind::SoftDice, vec![u(&[6], 27)], Box::new(move |t, v| t.soft_dice(v[0], &target2, 1.0))),
    ]
}

fn ops_suite(fault: Option<OpKind>) -> Result<Vec<GroupResult>> {
    ops_cases()
        .into_iter()
        .map(|(kind, inputs, f)| {
            let out = check_fn(&inputs, fault, f)?;
            Ok(GroupResult {
                name: kind.to_string(),
                max_rel_err: out.max(),
            })
        })
        .collect()
}

/// `fuse.blk0.attn.q.w` -> `fuse.blk0.attn.q`.
fn group_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(g, _)| g)
}

/// Checks the gradient of `loss_fn` with respect to every trainable
/// parameter of `store`, grouped by layer.
pub fn check_params<F>(store: &ParamStore, policy: &FreezePolicy, fault: Option<OpKind>, loss_fn: F) -> Result<Vec<GroupResult>>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store, policy);
    if let Some(k) = fault {
        g.inject_backward_fault(k);
    }
    let loss = loss_fn(&mut g)?;
    let grads = g.backward(loss)?;
    let analytic = g.param_grads(&grads);

    let frozen = FreezePolicy::new([""]);
    let mut work = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s, &frozen);
        let l = loss_fn(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut groups: BTreeMap<String, f64> = BTreeMap::new();
    for (name, a) in &analytic {
        let mut worst: f64 = 0.0;
        for j in 0..a.len() {
            let orig = work.get(name)?.data()[j];
            work.get_mut(name)?.data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(a.data()[j], numeric));
        }
        let e = groups.entry(group_of(name).to_string()).or_insert(0.0);
        *e = e.max(worst);
    }
    Ok(groups
        .into_iter()
        .map(|(name, max_rel_err)| GroupResult { name, max_rel_err })
        .collect())
}

/// Toy geometry shared by the composed suites: 16x16 frames, two frames,
/// `d = 8`, one fusion block, one `[seg]` token, 4x4 decoder grid.
pub fn toy_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.height = 16;
    c.data.width = 16;
    c.data.frames = 2;
    c.data.audio_bins = 8;
    c.encoders.audio_dim = 4;
    c.encoders.visual_dim = 8;
    c.encoders.text_dim = 8;
    c.encoders.heads = 2;
    c.fusion = FusionConfig {
        layers: 1,
        dim: 8,
        heads: 2,
        n_seg: 1,
        strategy: FusionStrategy::LearnableToken,
    };
    c.seg.dim = 8;
    c.seg.mem_dim = 4;
    c.seg.heads = 2;
    c
}

pub fn toy_gen_config() -> GenConfig {
    GenConfig {
        height: 16,
        width: 16,
        num_frames: 2,
        audio_bins: 8,
        min_objects: 1,
        max_objects: 2,
        min_size: 2.5,
        max_size: 4.0,
        ..GenConfig::default()
    }
}

fn fusion_suite(fault: Option<OpKind>) -> Result<Vec<GroupResult>> {
    let cfg = toy_config().fusion;
    let mut store = ParamStore::new();
    store.init_group(&fusion_specs(&cfg), 5);
    let policy = FreezePolicy::new(["tok.aud", "tok.vis"]);
    let d = cfg.dim;
    let audio = uniform(&[2, d], -1.0, 1.0, 1);
    let text = uniform(&[3, d], -1.0, 1.0, 2);
    let frames: Vec<Tensor> = (0..2).map(|i| uniform(&[4, d], -1.0, 1.0, 10 + i)).collect();
    let cls: Vec<Tensor> = (0..2).map(|i| uniform(&[1, d], -1.0, 1.0, 20 + i)).collect();
    check_params(&store, &policy, fault, |g| {
        let inputs = ProjectedInputs {
            audio: g.input(audio.clone()),
            text: g.input(text.clone()),
            frames: frames.iter().map(|f| g.input(f.clone())).collect(),
            cls: cls.iter().map(|c| g.input(c.clone())).collect(),
        };
        let seg = fuse_video(g, &cfg, &inputs)?;
        random_projection(g, seg, 7)
    })
}

fn decoder_suite(fault: Option<OpKind>) -> Result<Vec<GroupResult>> {
    let cfg = toy_config();
    let mut store = ParamStore::new();
    store.init_group(&segmenter_specs(&cfg), 6);
    let policy = FreezePolicy::new(["seg.enc.", "seg.mem."]);
    let (gh, gw) = cfg.seg_grid();
    let cond = uniform(&[gh * gw, cfg.seg.dim], -1.0, 1.0, 3);
    let prompt = uniform(&[1, cfg.fusion.dim], -1.0, 1.0, 4);
    let (h, w) = (cfg.data.height, cfg.data.width);
    let gt: Vec<u8> = (0..h * w)
        .map(|i| u8::from((3..9).contains(&(i / w)) && (5..12).contains(&(i % w))))
        .collect();
    check_params(&store, &policy, fault, |g| {
        let p = g.input(prompt.clone());
        let tokens = prompt_encode(g, p)?;
        let c = g.input(cond.clone());
        let dec = mask_decode(g, &cfg, c, tokens)?;
        mask_loss(g, dec.logits, &gt, LossWeights::default())
    })
}

fn end2end_suite(fault: Option<OpKind>) -> Result<Vec<GroupResult>> {
    let cfg = toy_config();
    let model = Model::init(cfg)?;
    let sample = generate_scene_with(11, &toy_gen_config(), Split::Train, TemplateKind::TextOnly)?;
    let feats = model.features(&sample)?;
    let policy = model.policy();
    check_params(&model.params, &policy, fault, |g| {
        let logits = model.first_frame_logits(g, &feats)?;
        mask_loss(g, logits, &feats.masks[0], LossWeights::default())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_suite_passes_and_catches_a_fault() {
        let ok = run(Scope::Ops, None).unwrap();
        assert!(ok.passed(), "{:?}", ok.failures().collect::<Vec<_>>());
        assert_eq!(ok.groups.len(), OpKind::DIFFERENTIABLE.len());
        let bad = run(Scope::Ops, Some(OpKind::Softmax)).unwrap();
        let failed: Vec<_> = bad.failures().map(|g| g.name.as_str()).collect();
        assert_eq!(failed, vec!["softmax"]);
    }
}

//! Simplified promptable video segmenter.
//!
//! Parameter groups: `seg.enc.*` frame encoder (frozen), `seg.mem.*` memory
//! attention and memory encoder (frozen), `seg.prompt.*` prompt encoder and
//! `seg.dec.*` two-way mask decoder.

use std::collections::VecDeque;

use crate::config::RunConfig;
use crate::data::VideoSample;
use crate::encoders::{check_geometry, patchify};
use crate::error::{contract, Result};
use crate::nn::{self, attention_specs, block_specs, layer_norm_specs, linear_specs, mlp_specs};
use crate::params::{FreezePolicy, Graph, Init, ParamSpec, ParamStore};
use crate::tensor::{Tensor, Var};

const ENC_BLOCKS: usize = 2;
const MEM_BLOCKS: usize = 2;
const DEC_BLOCKS: usize = 2;
/// Output gain of the frozen memory-attention residual branches. Small, so
/// the conditioned embedding stays close to the frame embedding the decoder
/// was trained on.
const MEM_GAIN: f64 = 0.1;

pub fn segmenter_specs(cfg: &RunConfig) -> Vec<ParamSpec> {
    let s = &cfg.seg;
    let (gh, gw) = cfg.seg_grid();
    let (ds, dm) = (s.dim, s.mem_dim);

    let mut specs = linear_specs("seg.enc.patch", 3 * s.patch * s.patch, ds, 1.0);
    specs.push(ParamSpec::new("seg.enc.pos", &[gh * gw, ds], Init::Normal(0.5)));
    for b in 0..ENC_BLOCKS {
        specs.extend(block_specs(&format!("seg.enc.blk{b}"), ds, 4, 1.0));
    }

    specs.extend(linear_specs("seg.mem.in", dm, ds, 1.0));
    for b in 0..MEM_BLOCKS {
        let p = format!("seg.mem.blk{b}");
        specs.extend(layer_norm_specs(&format!("{p}.ln1"), ds));
        specs.extend(attention_specs(&format!("{p}.self"), ds, ds, ds, MEM_GAIN));
        specs.extend(layer_norm_specs(&format!("{p}.ln2"), ds));
        specs.extend(layer_norm_specs(&format!("{p}.ln_m"), ds));
        specs.extend(attention_specs(&format!("{p}.cross"), ds, ds, ds, MEM_GAIN));
        specs.extend(layer_norm_specs(&format!("{p}.ln3"), ds));
        specs.extend(mlp_specs(&format!("{p}.mlp"), ds, 2 * ds, ds, MEM_GAIN));
    }
    specs.extend(linear_specs("seg.mem.enc_mask", 1, dm, 1.0));
    specs.extend(linear_specs("seg.mem.enc_frame", ds, dm, 1.0));

    specs.extend(linear_specs("seg.prompt.lin", cfg.fusion.dim, ds, 1.0));
    specs.extend(layer_norm_specs("seg.prompt.ln", ds));

    for b in 0..DEC_BLOCKS {
        let p = format!("seg.dec.blk{b}");
        for ln in ["ln_t1", "ln_i1", "ln_i2", "ln_t2", "ln_t3", "ln_t4", "ln_i3"] {
            specs.extend(layer_norm_specs(&format!("{p}.{ln}"), ds));
        }
        specs.extend(attention_specs(&format!("{p}.t2i"), ds, ds, ds, 1.0));
        specs.extend(attention_specs(&format!("{p}.i2t"), ds, ds, ds, 1.0));
        specs.extend(attention_specs(&format!("{p}.self"), ds, ds, ds, 1.0));
        specs.extend(mlp_specs(&format!("{p}.mlp_t"), ds, 2 * ds, ds, 1.0));
        specs.extend(mlp_specs(&format!("{p}.mlp_i"), ds, 2 * ds, ds, 1.0));
    }
    specs.extend(layer_norm_specs("seg.dec.ln_t", ds));
    specs.extend(layer_norm_specs("seg.dec.ln_i", ds));
    specs.extend(mlp_specs("seg.dec.hyper", ds, ds, ds, 1.0));
    // Presence head starts out confident that the object is visible.
    specs.push(ParamSpec::new("seg.dec.occ.w", &[ds, 1], Init::Zeros));
    specs.push(ParamSpec::new("seg.dec.occ.b", &[1], Init::Const(1.0)));
    specs
}

/// One frame -> `[h*w, d_s]` unconditioned embedding.
pub fn frame_encode(g: &mut Graph, cfg: &RunConfig, frame: &[f32]) -> Result<Var> {
    let x = g.input(patchify(frame, cfg.data.height, cfg.data.width, cfg.seg.patch)?);
    let h = nn::linear(g, "seg.enc.patch", x)?;
    let pos = g.param("seg.enc.pos")?;
    let mut z = g.add(h, pos)?;
    for b in 0..ENC_BLOCKS {
        z = nn::transformer_block(g, &format!("seg.enc.blk{b}"), z, cfg.seg.heads)?;
    }
    Ok(z)
}

/// Frame embeddings of every frame of a sample.
pub fn encode_frames(params: &ParamStore, cfg: &RunConfig, sample: &VideoSample) -> Result<Vec<Tensor>> {
    check_geometry(cfg, sample)?;
    let frozen = FreezePolicy::new([""]);
    (0..sample.num_frames)
        .map(|i| {
            let mut g = Graph::new(params, &frozen);
            let z = frame_encode(&mut g, cfg, sample.frame(i))?;
            Ok(g.value(z).clone())
        })
        .collect()
}

/// `[n_seg, d]` prompt -> one `[1, d_s]` prompt token (row 0 only).
pub fn prompt_encode(g: &mut Graph, prompt: Var) -> Result<Var> {
    let row0 = g.slice(prompt, 0, 0, 1)?;
    let h = nn::linear(g, "seg.prompt.lin", row0)?;
    nn::layer_norm(g, "seg.prompt.ln", h)
}

#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// `[H, W]`
    pub logits: Var,
    /// `[1, 1]` presence logit.
    pub occlusion: Var,
    /// `[1, d_s]`
    pub object_ptr: Var,
}

fn cross(g: &mut Graph, prefix: &str, q: Var, kv: Var, heads: usize) -> Result<Var> {
    Ok(nn::attention(g, prefix, q, kv, heads)?.out)
}

/// Two-way decoder over the conditioned embedding `[h*w, d_s]` and prompt
/// tokens `[1, d_s]`.
pub fn mask_decode(g: &mut Graph, cfg: &RunConfig, cond: Var, prompt_tokens: Var) -> Result<Decoded> {
    let heads = cfg.seg.heads;
    let (gh, gw) = cfg.seg_grid();
    if g.shape(cond) != [gh * gw, cfg.seg.dim] {
        return Err(contract(format!(
            "decoder expects a [{}, {}] embedding, got {:?}",
            gh * gw,
            cfg.seg.dim,
            g.shape(cond)
        )));
    }
    let (mut t, mut img) = (prompt_tokens, cond);
    for b in 0..DEC_BLOCKS {
        let p = format!("seg.dec.blk{b}");
        let ln = |g: &mut Graph, n: &str, x: Var| nn::layer_norm(g, &format!("{p}.{n}"), x);

        let tq = ln(g, "ln_t1", t)?;
        let ik = ln(g, "ln_i1", img)?;
        let d = cross(g, &format!("{p}.t2i"), tq, ik, heads)?;
        t = g.add(t, d)?;

        let iq = ln(g, "ln_i2", img)?;
        let tk = ln(g, "ln_t2", t)?;
        let d = cross(g, &format!("{p}.i2t"), iq, tk, heads)?;
        img = g.add(img, d)?;

        let tq = ln(g, "ln_t3", t)?;
        let d = cross(g, &format!("{p}.self"), tq, tq, heads)?;
        t = g.add(t, d)?;

        let h = ln(g, "ln_t4", t)?;
        let d = nn::mlp(g, &format!("{p}.mlp_t"), h)?;
        t = g.add(t, d)?;

        let h = ln(g, "ln_i3", img)?;
        let d = nn::mlp(g, &format!("{p}.mlp_i"), h)?;
        img = g.add(img, d)?;
    }
    let object_ptr = g.slice(t, 0, 0, 1)?;
    let tn = nn::layer_norm(g, "seg.dec.ln_t", object_ptr)?;
    let hyper = nn::mlp(g, "seg.dec.hyper", tn)?;
    let imgn = nn::layer_norm(g, "seg.dec.ln_i", img)?;
    let ht = g.transpose(hyper)?;
    let grid = g.matmul(imgn, ht)?;
    let grid = g.scale(grid, 1.0 / (cfg.seg.dim as f64).sqrt());
    let grid = g.reshape(grid, &[gh, gw, 1])?;
    let up = g.upsample_bilinear(grid, cfg.data.height, cfg.data.width)?;
    let logits = g.reshape(up, &[cfg.data.height, cfg.data.width])?;
    let occlusion = nn::linear(g, "seg.dec.occ", object_ptr)?;
    Ok(Decoded {
        logits,
        occlusion,
        object_ptr,
    })
}

/// Mask logits `[H, W]` plus frame embedding -> `[h*w/4, d_m]` memory map.
pub fn memory_encode(g: &mut Graph, cfg: &RunConfig, logits: Var, frame_emb: Var) -> Result<Var> {
    let (gh, gw) = cfg.seg_grid();
    let (h, w) = (cfg.data.height, cfg.data.width);
    let probs = g.sigmoid(logits);
    let mut m = g.reshape(probs, &[h, w, 1])?;
    while g.shape(m)[0] > gh {
        m = g.avg_pool2x(m)?;
    }
    if g.shape(m) != [gh, gw, 1] {
        return Err(contract(format!("mask pooled to {:?}, expected [{gh}, {gw}, 1]", g.shape(m))));
    }
    let m = g.reshape(m, &[gh * gw, 1])?;
    let mask_feat = nn::linear(g, "seg.mem.enc_mask", m)?;
    let frame_feat = nn::linear(g, "seg.mem.enc_frame", frame_emb)?;
    let sum = g.add(mask_feat, frame_feat)?;
    let dm = cfg.seg.mem_dim;
    let grid = g.reshape(sum, &[gh, gw, dm])?;
    let pooled = g.avg_pool2x(grid)?;
    g.reshape(pooled, &[gh * gw / 4, dm])
}

#[derive(Clone, Debug)]
pub struct MemoryEntry {
    /// `[h*w/4, d_m]`
    pub spatial_map: Tensor,
    /// `[1, d_s]`
    pub object_ptr: Tensor,
    pub frame_index: usize,
    pub pinned: bool,
}

/// FIFO memory with one pinned (prompted-frame) entry that is never evicted.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    pinned: Option<MemoryEntry>,
    recent: VecDeque<MemoryEntry>,
    capacity: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            pinned: None,
            recent: VecDeque::new(),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_empty(&self) -> bool {
        self.pinned.is_none() && self.recent.is_empty()
    }

    pub fn unpinned_len(&self) -> usize {
        self.recent.len()
    }

    /// Entries in frame order.
    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.pinned.iter().chain(self.recent.iter())
    }

    pub fn push(&mut self, entry: MemoryEntry) -> Result<()> {
        if let Some(last) = self.entries().last() {
            if entry.frame_index <= last.frame_index {
                return Err(contract(format!(
                    "memory push of frame {} after frame {}",
                    entry.frame_index, last.frame_index
                )));
            }
        }
        if entry.pinned {
            if self.pinned.is_some() || !self.recent.is_empty() {
                return Err(contract("the pinned entry must be the first and only pinned push"));
            }
            self.pinned = Some(entry);
            return Ok(());
        }
        self.recent.push_back(entry);
        while self.recent.len() > self.capacity {
            self.recent.pop_front();
        }
        Ok(())
    }
}

/// Conditions a frame embedding on the bank; identity when the bank is
/// empty. Also returns the per-head cross-attention weights.
pub fn memory_attention_traced(
    g: &mut Graph,
    cfg: &RunConfig,
    frame_emb: Var,
    bank: &MemoryBank,
) -> Result<(Var, Vec<Var>)> {
    if bank.is_empty() {
        return Ok((frame_emb, Vec::new()));
    }
    let heads = cfg.seg.heads;
    let mut rows = Vec::new();
    for e in bank.entries() {
        let sm = g.input(e.spatial_map.clone());
        rows.push(nn::linear(g, "seg.mem.in", sm)?);
        rows.push(g.input(e.object_ptr.clone()));
    }
    let memory = g.concat(&rows, 0)?;
    let mut x = frame_emb;
    let mut weights = Vec::new();
    for b in 0..MEM_BLOCKS {
        let p = format!("seg.mem.blk{b}");
        let h = nn::layer_norm(g, &format!("{p}.ln1"), x)?;
        let d = cross(g, &format!("{p}.self"), h, h, heads)?;
        x = g.add(x, d)?;
        let h = nn::layer_norm(g, &format!("{p}.ln2"), x)?;
        let m = nn::layer_norm(g, &format!("{p}.ln_m"), memory)?;
        let att = nn::attention(g, &format!("{p}.cross"), h, m, heads)?;
        weights.extend(att.weights);
        x = g.add(x, att.out)?;
        let h = nn::layer_norm(g, &format!("{p}.ln3"), x)?;
        let d = nn::mlp(g, &format!("{p}.mlp"), h)?;
        x = g.add(x, d)?;
    }
    Ok((x, weights))
}

pub fn memory_attention(g: &mut Graph, cfg: &RunConfig, frame_emb: Var, bank: &MemoryBank) -> Result<Var> {
    Ok(memory_attention_traced(g, cfg, frame_emb, bank)?.0)
}

#[derive(Clone, Debug)]
pub struct MaskPrediction {
    /// `[H, W]`
    pub logits: Tensor,
    pub occlusion_score: f64,
    /// `[1, d_s]`
    pub object_ptr: Tensor,
    /// False when the occlusion score fell below the threshold.
    pub present: bool,
}

impl MaskPrediction {
    /// Emitted binary mask: `logit > 0` where present, otherwise empty.
    pub fn mask(&self) -> Vec<u8> {
        self.logits
            .data()
            .iter()
            .map(|&l| u8::from(self.present && l > 0.0))
            .collect()
    }
}

/// Online propagation: frame 0 is decoded with the prompt on its raw
/// embedding and pinned; later frames are conditioned on the bank.
pub fn propagate_video(
    params: &ParamStore,
    cfg: &RunConfig,
    frame_embs: &[Tensor],
    prompt: &Tensor,
) -> Result<Vec<MaskPrediction>> {
    let frozen = FreezePolicy::new([""]);
    let mut bank = MemoryBank::new(cfg.seg.capacity);
    let mut out = Vec::with_capacity(frame_embs.len());
    for (i, emb) in frame_embs.iter().enumerate() {
        let mut g = Graph::new(params, &frozen);
        let p = g.input(prompt.clone());
        let tokens = prompt_encode(&mut g, p)?;
        let fe = g.input(emb.clone());
        let cond = memory_attention(&mut g, cfg, fe, &bank)?;
        let dec = mask_decode(&mut g, cfg, cond, tokens)?;
        let spatial = memory_encode(&mut g, cfg, dec.logits, fe)?;
        let occlusion_score = g.value(dec.occlusion).item();
        bank.push(MemoryEntry {
            spatial_map: g.value(spatial).clone(),
            object_ptr: g.value(dec.object_ptr).clone(),
            frame_index: i,
            pinned: i == 0,
        })?;
        out.push(MaskPrediction {
            logits: g.value(dec.logits).clone(),
            occlusion_score,
            object_ptr: g.value(dec.object_ptr).clone(),
            present: occlusion_score >= cfg.seg.occlusion_threshold,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::uniform;

    fn toy_cfg() -> RunConfig {
        let mut c = RunConfig::default();
        c.data.height = 16;
        c.data.width = 16;
        c.seg.dim = 8;
        c.seg.mem_dim = 4;
        c.seg.heads = 2;
        c.fusion.dim = 8;
        c
    }

    fn store(cfg: &RunConfig) -> ParamStore {
        let mut s = ParamStore::new();
        s.init_group(&segmenter_specs(cfg), 17);
        s
    }

    fn entry(frame: usize, pinned: bool) -> MemoryEntry {
        MemoryEntry {
            spatial_map: Tensor::zeros(&[4, 4]),
            object_ptr: Tensor::zeros(&[1, 8]),
            frame_index: frame,
            pinned,
        }
    }

    #[test]
    fn fifo_keeps_pin_and_latest() {
        let mut bank = MemoryBank::new(2);
        bank.push(entry(0, true)).unwrap();
        bank.push(entry(1, false)).unwrap();
        bank.push(entry(2, false)).unwrap();
        assert_eq!(bank.unpinned_len(), 2);
        bank.push(entry(3, false)).unwrap();
        let frames: Vec<_> = bank.entries().map(|e| e.frame_index).collect();
        assert_eq!(frames, vec![0, 2, 3]);
        assert!(bank.push(entry(3, false)).is_err());
        for f in 4..104 {
            bank.push(entry(f, false)).unwrap();
        }
        assert!(bank.entries().next().unwrap().pinned);
    }

    #[test]
    fn frame_embedding_shape_and_determinism() {
        let cfg = RunConfig::default();
        let s = store(&cfg);
        let frame = vec![0.25f32; 3 * 32 * 32];
        let frozen = FreezePolicy::new([""]);
        let mut g = Graph::new(&s, &frozen);
        let a = frame_encode(&mut g, &cfg, &frame).unwrap();
        let b = frame_encode(&mut g, &cfg, &frame).unwrap();
        assert_eq!(g.shape(a), &[64, 64]);
        assert!(g.value(a).bits_eq(g.value(b)));
        assert!(frame_encode(&mut g, &cfg, &frame[1..]).is_err());
    }

    #[test]
    fn zero_prompt_gives_zero_token() {
        let cfg = toy_cfg();
        let s = store(&cfg);
        let policy = FreezePolicy::all_trainable();
        let mut g = Graph::new(&s, &policy);
        let p = g.input(Tensor::zeros(&[3, 8]));
        let t = prompt_encode(&mut g, p).unwrap();
        assert_eq!(g.shape(t), &[1, 8]);
        assert!(g.value(t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_hyper_head_gives_zero_logits() {
        let cfg = toy_cfg();
        let mut s = store(&cfg);
        for n in ["seg.dec.hyper.fc2.w", "seg.dec.hyper.fc2.b"] {
            let shape = s.get(n).unwrap().shape().to_vec();
            s.insert(n, Tensor::zeros(&shape));
        }
        let policy = FreezePolicy::all_trainable();
        let mut g = Graph::new(&s, &policy);
        let cond = g.input(uniform(&[16, 8], -1.0, 1.0, 1));
        let tok = g.input(Tensor::zeros(&[1, 8]));
        let d = mask_decode(&mut g, &cfg, cond, tok).unwrap();
        assert_eq!(g.shape(d.logits), &[16, 16]);
        assert!(g.value(d.logits).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(d.occlusion).item(), 1.0);
    }

    #[test]
    fn empty_bank_is_identity_and_memory_matters() {
        let cfg = toy_cfg();
        let s = store(&cfg);
        let frozen = FreezePolicy::new([""]);
        let mut g = Graph::new(&s, &frozen);
        let fe = g.input(uniform(&[16, 8], -1.0, 1.0, 3));
        let bank = MemoryBank::new(2);
        assert_eq!(memory_attention(&mut g, &cfg, fe, &bank).unwrap(), fe);

        let mut e = entry(0, true);
        e.spatial_map = uniform(&[4, 4], -1.0, 1.0, 4);
        e.object_ptr = uniform(&[1, 8], -1.0, 1.0, 5);
        let mut bank = MemoryBank::new(2);
        bank.push(e.clone()).unwrap();
        let (a, weights) = memory_attention_traced(&mut g, &cfg, fe, &bank).unwrap();
        for w in weights {
            let v = g.value(w);
            assert_eq!(v.shape(), &[16, 5]);
            for r in 0..16 {
                assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        e.spatial_map.data_mut()[0] += 0.5;
        let mut bank2 = MemoryBank::new(2);
        bank2.push(e).unwrap();
        let b = memory_attention(&mut g, &cfg, fe, &bank2).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) > 0.0);
    }

    #[test]
    fn memory_encode_shapes_and_linearity() {
        let cfg = toy_cfg();
        let s = store(&cfg);
        let frozen = FreezePolicy::new([""]);
        let mut g = Graph::new(&s, &frozen);
        let zero = g.input(Tensor::zeros(&[16, 16]));
        let fe = uniform(&[16, 8], -1.0, 1.0, 8);
        let fe1 = g.input(fe.clone());
        let mut fe2 = fe.clone();
        fe2.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let fe2 = g.input(fe2);
        let fz = g.input(Tensor::zeros(&[16, 8]));
        let m1 = memory_encode(&mut g, &cfg, zero, fe1).unwrap();
        let m2 = memory_encode(&mut g, &cfg, zero, fe2).unwrap();
        let m0 = memory_encode(&mut g, &cfg, zero, fz).unwrap();
        assert_eq!(g.shape(m1), &[4, 4]);
        // m = mask part + frame part; frame part excludes the frame bias.
        let b = s.get("seg.mem.enc_frame.b").unwrap().data().to_vec();
        for r in 0..4 {
            for c in 0..4 {
                let mask_part = g.value(m0).row(r)[c] - b[c];
                let f1 = g.value(m1).row(r)[c] - mask_part - b[c];
                let f2 = g.value(m2).row(r)[c] - mask_part - b[c];
                assert!((f2 - 2.0 * f1).abs() < 1e-12);
            }
        }
        // Constant 0.5 mask encodes to w*0.5 + b at every cell.
        let w = s.get("seg.mem.enc_mask.w").unwrap().data();
        let bm = s.get("seg.mem.enc_mask.b").unwrap().data();
        for c in 0..4 {
            let expect = 0.5 * w[c] + bm[c] + b[c];
            assert!((g.value(m0).row(0)[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn propagation_emits_one_prediction_per_frame() {
        let cfg = toy_cfg();
        let s = store(&cfg);
        let embs: Vec<Tensor> = (0..3).map(|i| uniform(&[16, 8], -1.0, 1.0, 20 + i)).collect();
        let prompt = uniform(&[1, 8], -1.0, 1.0, 30);
        let preds = propagate_video(&s, &cfg, &embs, &prompt).unwrap();
        assert_eq!(preds.len(), 3);
        assert!(preds.iter().all(|p| p.logits.is_finite() && p.present));

        let mut absent = cfg.clone();
        absent.seg.occlusion_threshold = 2.0;
        let preds = propagate_video(&s, &absent, &embs, &prompt).unwrap();
        assert!(preds.iter().all(|p| p.mask().iter().all(|&m| m == 0)));
    }
}

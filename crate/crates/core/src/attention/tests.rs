use super::*;
use crate::numerics::gradcheck::{DEFAULT_EPS, DEFAULT_TOL};
use crate::numerics::ExecMode;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_state(r: &mut ChaCha8Rng, frames: usize, grid: (usize, usize), c: usize) -> TokenState {
    let l = grid.0 * grid.1;
    TokenState::new(
        Tensor::from_fn([frames * l, c], |_| r.random_range(-1.0..1.0)),
        Tensor::from_fn([frames, c], |_| r.random_range(-1.0..1.0)),
        frames,
        grid,
    )
}

fn setup(cfg: &BlockConfig, seed: u64) -> (ParamStore, DecoderBlock) {
    let mut store = ParamStore::new();
    let b = DecoderBlock::new(&mut store, "b", cfg, &mut rng(seed));
    (store, b)
}

fn zero(store: &mut ParamStore, l: &Linear) {
    store.value_mut(l.w).data_mut().fill(0.0);
    store.value_mut(l.b).data_mut().fill(0.0);
}

fn run_vca(store: &ParamStore, b: &DecoderBlock, s: &TokenState, cfg: &BlockConfig) -> TokenState {
    let tape = Tape::with_mode(ExecMode::DETERMINISTIC);
    let p = Binder::new(&tape, store);
    let ctx = BlockContext::new(s.frames, s.grid, cfg);
    video_camera_attention(&p, &b.vca_norm, &b.vca, TokenVars::constant(&tape, s), &ctx).to_state()
}

fn run_block(store: &ParamStore, b: &DecoderBlock, s: &TokenState, cfg: &BlockConfig) -> TokenState {
    let tape = Tape::with_mode(ExecMode::DETERMINISTIC);
    let p = Binder::new(&tape, store);
    let ctx = BlockContext::new(s.frames, s.grid, cfg);
    b.forward(&p, TokenVars::constant(&tape, s), &ctx).to_state()
}

#[test]
fn mixed_sequence_layout() {
    let s = random_state(&mut rng(0), 2, (2, 2), 4);
    let (seq, idx) = build_mixed_sequence(&s);
    assert_eq!(seq.rows(), 10);
    assert_eq!((idx.camera_index(0), idx.camera_index(1)), (0, 5));
    assert_eq!(seq.row(5), s.camera.row(1));
    assert_eq!(seq.row(idx.visual_index(1, 2)), s.visual.row(6));
    assert_eq!(split_mixed_sequence(&seq, &idx, s.grid), s);

    let one = random_state(&mut rng(1), 1, (1, 3), 4);
    let (seq, idx) = build_mixed_sequence(&one);
    assert_eq!(seq.rows(), 4);
    assert!(idx.is_camera(0) && !idx.is_camera(1));
}

#[test]
fn on_tape_mix_matches_plain_build() {
    let s = random_state(&mut rng(2), 3, (2, 1), 4);
    let tape = Tape::new();
    let idx = MixedIndex::new(3, 2);
    let x = TokenVars::constant(&tape, &s);
    let seq = idx.mix(&x);
    assert_eq!(seq.to_tensor(), build_mixed_sequence(&s).0);
    assert_eq!(idx.split(seq, s.grid).to_state(), s);
}

#[test]
fn causal_mask_two_frames_one_patch() {
    let m = build_blocked_causal_mask(2, 1);
    // order: cam1, vis1, cam2, vis2
    assert_eq!(m.row(0), &[true, true, false, false]);
    assert_eq!(m.row(2), &[true; 4]);
    assert_eq!(m.row(1), &[true; 4]);
    assert_eq!(m.row(3), &[true; 4]);
    assert!(build_blocked_causal_mask(1, 5).all_true());
    assert!(build_full_mask(6, 3).all_true());
}

#[test]
fn causal_flag_selects_mask() {
    let mut cfg = BlockConfig::new(8, 2);
    assert!(!BlockContext::new(3, (1, 2), &cfg).mask.all_true());
    cfg.flags.causal_mask = false;
    assert!(BlockContext::new(3, (1, 2), &cfg).mask.all_true());
}

proptest! {
    #[test]
    fn mask_rows_follow_frame_order(t in 1usize..=8, l in 1usize..=16) {
        let m = build_blocked_causal_mask(t, l);
        let stride = 1 + l;
        prop_assert_eq!(m.len(), t * stride);
        for i in 0..m.len() {
            for j in 0..m.len() {
                let want = i % stride != 0 || j / stride <= i / stride;
                prop_assert_eq!(m.allows(i, j), want);
            }
        }
    }

    #[test]
    fn mixed_round_trip(t in 1usize..=5, gr in 1usize..=3, gc in 1usize..=3, seed in any::<u64>()) {
        let s = random_state(&mut rng(seed), t, (gr, gc), 4);
        let (seq, idx) = build_mixed_sequence(&s);
        prop_assert_eq!(split_mixed_sequence(&seq, &idx, s.grid), s);
    }
}

#[test]
fn zero_value_projection_is_residual_identity() {
    let cfg = BlockConfig::new(8, 2);
    let (mut store, b) = setup(&cfg, 3);
    let c = cfg.width;
    let w = store.value_mut(b.vca.qkv.w);
    for r in 0..c {
        w.data_mut()[r * 3 * c + 2 * c..(r + 1) * 3 * c].fill(0.0);
    }
    let s = random_state(&mut rng(4), 3, (2, 2), c);
    assert_eq!(run_vca(&store, &b, &s, &cfg), s);
}

#[test]
fn camera_token_ignores_future_frames() {
    let cfg = BlockConfig::new(8, 2);
    let (store, b) = setup(&cfg, 5);
    let s = random_state(&mut rng(6), 3, (2, 2), 8);
    let base = run_vca(&store, &b, &s, &cfg);
    let mut r = rng(7);
    for t in 0..2 {
        let mut p = s.clone();
        for f in t + 1..3 {
            p.camera.data_mut()[f * 8..(f + 1) * 8].iter_mut().for_each(|v| *v += r.random_range(-3.0..3.0));
            p.visual.data_mut()[f * 32..(f + 1) * 32].iter_mut().for_each(|v| *v = r.random_range(-3.0..3.0));
        }
        let out = run_vca(&store, &b, &p, &cfg);
        for u in 0..=t {
            assert_eq!(out.camera.row(u), base.camera.row(u), "camera token {u} changed");
        }
        assert_ne!(out.camera.row(2), base.camera.row(2));
    }
}

#[test]
fn identical_frames_give_identical_visual_outputs() {
    let cfg = BlockConfig::new(8, 2);
    let (store, b) = setup(&cfg, 8);
    let mut s = random_state(&mut rng(9), 3, (2, 2), 8);
    let (first, rest) = s.visual.data_mut().split_at_mut(32);
    rest[..32].copy_from_slice(first);
    let out = run_vca(&store, &b, &s, &cfg);
    assert_eq!(&out.visual.data()[..32], &out.visual.data()[32..64]);
    assert_ne!(&out.visual.data()[..32], &out.visual.data()[64..]);
}

#[test]
fn neighbor_context_sizes() {
    let l = 6;
    let c = CnaLayout::new(4, l, NeighborOrder::PrevNext);
    assert_eq!((0..4).map(|t| c.context_size(t)).collect::<Vec<_>>(), vec![l, 2 * l, 2 * l, l]);
    let two = CnaLayout::new(2, l, NeighborOrder::PrevNext);
    // frame 1 sees exactly frame 2's rows and vice versa
    assert_eq!(&two.key_rows[..l], &(l..2 * l).collect::<Vec<_>>()[..]);
    assert_eq!(&two.key_rows[l..], &(0..l).collect::<Vec<_>>()[..]);
    assert_eq!(CnaLayout::new(1, l, NeighborOrder::PrevNext).context_size(0), 0);
}

/// Direct evaluation of the neighbor attention for frame `t`: keys and
/// values are the explicit concatenation of the previous and next frames.
fn cna_oracle(h: &Tensor, wqkv: &Tensor, wo: &Tensor, frames: usize, grid: (usize, usize), heads: usize) -> Tensor {
    let c = h.cols();
    let l = grid.0 * grid.1;
    let d = c / heads;
    let proj = |row: &[f64], off: usize| -> Vec<f64> {
        (0..c).map(|j| (0..c).map(|i| row[i] * wqkv.data()[i * 3 * c + off + j]).sum()).collect()
    };
    let rotate = |v: &mut [f64], k: usize| {
        let (pr, pc) = ((k / grid.1) as f64, (k % grid.1) as f64);
        let pairs = d / 2;
        let half = pairs / 2;
        for hd in 0..heads {
            for p in 0..pairs {
                let ang = if p < half {
                    pr * 100f64.powf(-(p as f64) / half as f64)
                } else {
                    pc * 100f64.powf(-((p - half) as f64) / (pairs - half) as f64)
                };
                let (a, b) = (v[hd * d + 2 * p], v[hd * d + 2 * p + 1]);
                v[hd * d + 2 * p] = a * ang.cos() - b * ang.sin();
                v[hd * d + 2 * p + 1] = a * ang.sin() + b * ang.cos();
            }
        }
    };
    let mut q = Vec::new();
    let mut k = Vec::new();
    let mut v = Vec::new();
    for r in 0..frames * l {
        let mut qr = proj(h.row(r), 0);
        let mut kr = proj(h.row(r), c);
        rotate(&mut qr, r % l);
        rotate(&mut kr, r % l);
        q.push(qr);
        k.push(kr);
        v.push(proj(h.row(r), 2 * c));
    }
    let mut out = vec![0.0; frames * l * c];
    for t in 0..frames {
        let mut ctx = Vec::new();
        if t > 0 {
            ctx.extend((t - 1) * l..t * l);
        }
        if t + 1 < frames {
            ctx.extend((t + 1) * l..(t + 2) * l);
        }
        for i in t * l..(t + 1) * l {
            let mut a = vec![0.0; c];
            for hd in 0..heads {
                let s = hd * d..(hd + 1) * d;
                let logits: Vec<f64> = ctx
                    .iter()
                    .map(|&j| q[i][s.clone()].iter().zip(&k[j][s.clone()]).map(|(x, y)| x * y).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
                for (n, &j) in ctx.iter().enumerate() {
                    let wgt = (logits[n] - m).exp() / z;
                    for e in s.clone() {
                        a[e] += wgt * v[j][e];
                    }
                }
            }
            for jj in 0..c {
                out[i * c + jj] = (0..c).map(|e| a[e] * wo.data()[e * c + jj]).sum();
            }
        }
    }
    Tensor::new(vec![frames * l, c], out)
}

#[test]
fn neighbor_attention_matches_direct_evaluation() {
    let cfg = BlockConfig::new(8, 2);
    let (store, b) = setup(&cfg, 10);
    for frames in [2, 3, 4] {
        let s = random_state(&mut rng(frames as u64), frames, (2, 3), 8);
        let tape = Tape::new();
        let p = Binder::new(&tape, &store);
        let ctx = BlockContext::new(frames, s.grid, &cfg);
        let got = cross_neighbor_attention(&p, &b.cna, tape.constant(s.visual.clone()), &ctx).to_tensor();
        let want = cna_oracle(&s.visual, store.value(b.cna.qkv.w), store.value(b.cna.out.w), frames, s.grid, 2);
        assert!(got.max_abs_diff(&want) < 1e-12, "T={frames}: {}", got.max_abs_diff(&want));
    }
}

#[test]
fn zeroed_middle_frame_leaves_outer_frames_unchanged() {
    let cfg = BlockConfig::new(8, 2);
    let (store, b) = setup(&cfg, 11);
    let mut s = random_state(&mut rng(12), 3, (2, 2), 8);
    s.visual.data_mut()[32..64].fill(0.0);
    let tape = Tape::new();
    let p = Binder::new(&tape, &store);
    let ctx = BlockContext::new(3, s.grid, &cfg);
    let x = tape.constant(s.visual.clone());
    let out = framewise_modulate(&p, &b.cna_norm, None, x, |h| cross_neighbor_attention(&p, &b.cna, h, &ctx)).to_tensor();
    assert_eq!(&out.data()[..32], &s.visual.data()[..32]);
    assert_eq!(&out.data()[64..], &s.visual.data()[64..]);
    assert_ne!(&out.data()[32..64], &s.visual.data()[32..64]);
}

#[test]
fn zero_init_modulation_is_plain_residual() {
    let cfg = BlockConfig::new(8, 2);
    let (store, b) = setup(&cfg, 13);
    let s = random_state(&mut rng(14), 3, (1, 2), 8);
    let tape = Tape::new();
    let p = Binder::new(&tape, &store);
    let x = tape.constant(s.visual.clone());
    let cam = tape.constant(s.camera.clone());
    let m = b.ffn_mod.forward(&p, cam);
    assert!(m.gamma.value().data().iter().chain(m.beta.value().data()).chain(m.delta.value().data()).all(|&v| v == 0.0));
    let with = framewise_modulate(&p, &b.ffn_norm, Some(m), x, |h| b.ffn.forward(&p, h)).to_tensor();
    let without = framewise_modulate(&p, &b.ffn_norm, None, x, |h| b.ffn.forward(&p, h)).to_tensor();
    assert_eq!(with, without);
}

#[test]
fn closed_gate_passes_frame_through() {
    let cfg = BlockConfig::new(8, 2);
    let (store, b) = setup(&cfg, 15);
    let s = random_state(&mut rng(16), 3, (1, 2), 8);
    let tape = Tape::new();
    let p = Binder::new(&tape, &store);
    let x = tape.constant(s.visual.clone());
    let mut r = rng(17);
    let mut delta = Tensor::from_fn([3, 8], |_| r.random_range(-0.5..0.5));
    delta.data_mut()[8..16].fill(-1.0);
    let m = Modulation {
        gamma: tape.constant(Tensor::from_fn([3, 8], |_| r.random_range(-0.5..0.5))),
        beta: tape.constant(Tensor::from_fn([3, 8], |_| r.random_range(-0.5..0.5))),
        delta: tape.constant(delta),
    };
    let out = framewise_modulate(&p, &b.ffn_norm, Some(m), x, |h| b.ffn.forward(&p, h)).to_tensor();
    assert_eq!(&out.data()[16..32], &s.visual.data()[16..32]);
    assert_ne!(&out.data()[..16], &s.visual.data()[..16]);
}

#[test]
fn distinct_camera_tokens_give_distinct_modulation() {
    let mut store = ParamStore::new();
    let mut r = rng(18);
    let m = Modulator::new(&mut store, "m", 8, &mut r);
    *store.value_mut(m.linear.w) = Tensor::from_fn([8, 24], |_| r.random_range(-1.0..1.0));
    let cam = Tensor::from_fn([4, 8], |_| r.random_range(-1.0..1.0));
    let tape = Tape::new();
    let p = Binder::new(&tape, &store);
    let out = m.forward(&p, tape.constant(cam));
    for v in [out.gamma, out.beta, out.delta] {
        let t = v.to_tensor();
        for a in 0..4 {
            for b in a + 1..4 {
                assert_ne!(t.row(a), t.row(b));
            }
        }
    }
}

#[test]
fn zeroed_output_projections_make_block_identity() {
    let cfg = BlockConfig::new(8, 2);
    let (mut store, b) = setup(&cfg, 19);
    zero(&mut store, &b.vca.out);
    zero(&mut store, &b.cna.out);
    zero(&mut store, &b.ffn.down);
    let s = random_state(&mut rng(20), 3, (2, 2), 8);
    assert_eq!(run_block(&store, &b, &s, &cfg), s);
}

#[test]
fn fresh_block_ignores_modulation_flag() {
    let cfg = BlockConfig::new(8, 2);
    let (store, b) = setup(&cfg, 21);
    let s = random_state(&mut rng(22), 3, (2, 2), 8);
    let mut off = cfg;
    off.flags.modulation = false;
    assert_eq!(run_block(&store, &b, &s, &cfg), run_block(&store, &b, &s, &off));
}

#[test]
fn single_frame_skips_neighbor_attention() {
    let cfg = BlockConfig::new(8, 2);
    let (store, b) = setup(&cfg, 23);
    let s = random_state(&mut rng(24), 1, (2, 2), 8);
    let mut off = cfg;
    off.flags.cna = false;
    assert_eq!(run_block(&store, &b, &s, &cfg), run_block(&store, &b, &s, &off));
}

#[test]
fn neighbor_order_only_matters_when_enabled() {
    let mut cfg = BlockConfig::new(8, 2);
    cfg.flags.cna = false;
    let (store, b) = setup(&cfg, 25);
    let s = random_state(&mut rng(26), 4, (2, 2), 8);
    let mut swapped = cfg;
    swapped.neighbor_order = NeighborOrder::NextPrev;
    assert_eq!(run_block(&store, &b, &s, &cfg), run_block(&store, &b, &s, &swapped));

    cfg.flags.cna = true;
    swapped.flags.cna = true;
    let a = run_block(&store, &b, &s, &cfg);
    let c = run_block(&store, &b, &s, &swapped);
    assert!(a.visual.max_abs_diff(&c.visual) < 1e-12);
    let mut nocna = cfg;
    nocna.flags.cna = false;
    assert!(a.visual.max_abs_diff(&run_block(&store, &b, &s, &nocna).visual) > 1e-6);
}

#[test]
fn block_gradients_match_finite_differences() {
    for case in grad_cases() {
        let rep = case.check_seeds(0, 3, DEFAULT_EPS, DEFAULT_TOL).unwrap();
        assert!(rep.pass, "{}: {}", case.name, rep.max_rel_err);
    }
}

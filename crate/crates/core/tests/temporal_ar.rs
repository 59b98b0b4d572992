mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{flatten, mat, max_abs_diff};
use vidroute::data::{corrupt_temporal, generate_dataset, DatasetSpec};
use vidroute::gradcheck::{grad_check_store, GradCheckOptions};
use vidroute::router::LatentTokens;
use vidroute::temporal::{
    psi_forward, reassemble, refine_chunk, split_chunks, start_chunk, temporal_refine, TamParams, TemporalDims,
};
use vidroute::train::suite::perturb;
use vidroute::train::{evaluate, Mode, TrainConfig, Trainer};
use vidroute::{Error, ParamStore, Tape, Tensor};

fn dims(d: usize, s: usize, layers: usize, heads: usize) -> TemporalDims {
    TemporalDims {
        latent_dim: d,
        tokens_per_frame: s,
        inner_dim: d,
        layers,
        heads,
    }
}

fn tam(dims: TemporalDims, beta: f64, seed: u64, jitter: f64) -> (ParamStore, TamParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = TamParams::new(&mut store, "tam", dims, beta, &mut rng).unwrap();
    if jitter > 0.0 {
        perturb(&mut store, jitter, seed ^ 0x7a).unwrap();
    }
    (store, params)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn refine(store: &ParamStore, params: &TamParams, z: &Tensor, frames: usize, k: usize) -> vidroute::Result<Tensor> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let tokens = LatentTokens::new(&tape, zv, frames, params.dims.tokens_per_frame)?;
    let out = temporal_refine(&mut tape, store, params, &tokens, k)?;
    Ok(tape.value(out.tokens).clone())
}

fn psi(store: &ParamStore, params: &TamParams, x: &Tensor, positions: &[usize]) -> vidroute::Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = psi_forward(&mut tape, store, &params.psi, xv, positions)?;
    Ok(tape.value(out).clone())
}

#[test]
fn single_chunk_holds_every_frame() {
    let mut tape = Tape::new();
    let z = tape.constant(randn(&[12, 2], 1));
    let tokens = LatentTokens::new(&tape, z, 4, 3).unwrap();
    let chunks = split_chunks(&mut tape, &tokens, 1).unwrap();
    assert_eq!(chunks.len(), 1);
    assert_eq!(chunks[0].payload_positions, vec![1, 2, 3, 4]);
    assert!(chunks[0].conditioning.is_none());
}

#[test]
fn default_chunk_count_is_four() {
    assert_eq!(TrainConfig::desk().chunks, 4);
    assert_eq!(TrainConfig::paper().chunks, 4);
}

#[test]
fn desk_split_reassembles_exactly() {
    let z = randn(&[128, 32], 2);
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let tokens = LatentTokens::new(&tape, zv, 8, 16).unwrap();
    let chunks = split_chunks(&mut tape, &tokens, 4).unwrap();
    assert_eq!(chunks.len(), 4);
    for (k, c) in chunks.iter().enumerate() {
        assert_eq!(c.index, k + 1);
        assert_eq!(c.frames(), 2);
        assert_eq!(tape.shape(c.payload), &[32, 32]);
        assert_eq!(c.payload_positions, vec![2 * k + 1, 2 * k + 2]);
    }
    let back = reassemble(&mut tape, &chunks).unwrap();
    assert!(tape.value(back).bit_eq(&z));
}

#[test]
fn indivisible_split_names_frames_and_chunks() {
    let mut tape = Tape::new();
    let z = tape.constant(randn(&[10, 2], 3));
    let tokens = LatentTokens::new(&tape, z, 10, 1).unwrap();
    let err = split_chunks(&mut tape, &tokens, 4).unwrap_err();
    assert!(matches!(err, Error::Chunking { frames: 10, chunks: 4 }));
    assert!(err.to_string().contains("10") && err.to_string().contains('4'));
}

#[test]
fn chunk_token_positions_repeat_per_frame() {
    let (store, params) = tam(dims(2, 3, 1, 1), 0.2, 4, 0.0);
    let mut tape = Tape::new();
    let z = tape.constant(randn(&[12, 2], 5));
    let tokens = LatentTokens::new(&tape, z, 4, 3).unwrap();
    let mut chunks = split_chunks(&mut tape, &tokens, 2).unwrap();
    let start = start_chunk(&mut tape, &store, &params);
    chunks[0].conditioning = Some(start.last_frame(&mut tape).unwrap());
    assert_eq!(chunks[0].token_positions(), vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
    let all = chunks[0].tokens(&mut tape).unwrap();
    assert_eq!(tape.shape(all), &[9, 2]);
}

#[test]
fn psi_ignores_later_frames() {
    let (store, params) = tam(dims(4, 2, 2, 2), 0.2, 6, 0.3);
    let pos = [3, 3, 4, 4, 5, 5];
    let x = randn(&[6, 4], 7);
    let base = psi(&store, &params, &x, &pos).unwrap();
    let mut moved = x.data().to_vec();
    for v in &mut moved[16..] {
        *v = -3.0 * *v + 1.0;
    }
    let out = psi(&store, &params, &Tensor::new(&[6, 4], moved).unwrap(), &pos).unwrap();
    assert_eq!(&out.data()[..16], &base.data()[..16]);
    assert_ne!(&out.data()[16..], &base.data()[16..]);
}

#[test]
fn psi_with_zero_output_projections_is_identity() {
    let (mut store, params) = tam(dims(4, 2, 2, 2), 0.2, 8, 0.3);
    for n in 0..2 {
        for name in ["attn.output", "ffn.out.weight", "ffn.out.bias"] {
            let id = store.lookup(&format!("tam.psi.{n}.{name}")).unwrap();
            store.get_mut(id).map_in_place(|_| 0.0).unwrap();
        }
    }
    let x = randn(&[6, 4], 9);
    assert!(psi(&store, &params, &x, &[0, 0, 1, 1, 2, 2]).unwrap().bit_eq(&x));
}

#[test]
fn psi_single_layer_single_head_matches_oracle() {
    let (store, params) = tam(dims(4, 2, 1, 1), 0.2, 10, 0.3);
    let x = randn(&[6, 4], 11);
    let pos = [0, 0, 1, 1, 2, 2];
    let out = psi(&store, &params, &x, &pos).unwrap();
    let expect = common::psi(&mat(&x), &pos, &store, "tam.psi", 1, 1);
    assert!(max_abs_diff(out.data(), &flatten(&expect)) <= 1e-10);
}

#[test]
fn psi_two_layers_two_heads_matches_oracle() {
    let (store, params) = tam(dims(4, 2, 2, 2), 0.2, 12, 0.3);
    let x = randn(&[6, 4], 13);
    let pos = [1, 1, 2, 2, 5, 5];
    let out = psi(&store, &params, &x, &pos).unwrap();
    let expect = common::psi(&mat(&x), &pos, &store, "tam.psi", 2, 2);
    assert!(max_abs_diff(out.data(), &flatten(&expect)) <= 1e-10);
}

#[test]
fn psi_rejects_decreasing_positions() {
    let (store, params) = tam(dims(4, 1, 1, 1), 0.2, 14, 0.0);
    let err = psi(&store, &params, &randn(&[3, 4], 15), &[0, 2, 1]).unwrap_err();
    assert!(matches!(err, Error::Ordering { token: 2 }));
}

#[test]
fn refine_chunk_requires_conditioning() {
    let (store, params) = tam(dims(2, 1, 1, 1), 0.2, 16, 0.0);
    let mut tape = Tape::new();
    let z = tape.constant(randn(&[2, 2], 17));
    let tokens = LatentTokens::new(&tape, z, 2, 1).unwrap();
    let chunks = split_chunks(&mut tape, &tokens, 2).unwrap();
    let start = start_chunk(&mut tape, &store, &params);
    let err = refine_chunk(&mut tape, &store, &params, &start, &chunks[0]).unwrap_err();
    assert!(matches!(err, Error::TeacherForcing(1)));
}

#[test]
fn refine_chunk_single_frame_matches_oracle() {
    // One frame per chunk and one token per frame at width 2, the narrowest
    // width rotary embeddings and layer norm admit.
    let (store, params) = tam(dims(2, 1, 1, 1), 0.2, 18, 0.5);
    let z = randn(&[2, 2], 19);
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let tokens = LatentTokens::new(&tape, zv, 2, 1).unwrap();
    let mut chunks = split_chunks(&mut tape, &tokens, 2).unwrap();
    let start = start_chunk(&mut tape, &store, &params);
    chunks[0].conditioning = Some(start.last_frame(&mut tape).unwrap());
    let (enhanced, bias) = refine_chunk(&mut tape, &store, &params, &start, &chunks[0]).unwrap();

    let s0 = common::param(&store, "tam.start");
    let ctx = common::psi(&s0, &[0], &store, "tam.psi", 1, 1);
    let queries = vec![s0[0].clone(), mat(&z)[0].clone()];
    let b = common::cross_attention(&ctx, &queries, &store, "tam.phi");
    assert!(max_abs_diff(tape.value(bias).data(), &flatten(&b)) <= 1e-10);
    let expect: Vec<f64> = (0..2).map(|c| z.data()[c] + 0.2 * b[1][c]).collect();
    assert!(max_abs_diff(tape.value(enhanced.payload).data(), &expect) <= 1e-10);
}

#[test]
fn full_trace_matches_oracle() {
    let (store, params) = tam(dims(2, 1, 1, 1), 0.2, 20, 0.5);
    let z = randn(&[2, 2], 21);
    let out = refine(&store, &params, &z, 2, 2).unwrap();
    let expect = common::temporal_refine(&mat(&z), 2, 1, 2, &store, "tam", 1, 1, 0.2);
    assert!(max_abs_diff(out.data(), &flatten(&expect)) <= 1e-10);
}

#[test]
fn desk_shaped_refinement_matches_oracle() {
    let (store, params) = tam(dims(8, 3, 2, 2), 0.2, 22, 0.3);
    let z = randn(&[24, 8], 23);
    let out = refine(&store, &params, &z, 8, 4).unwrap();
    let expect = common::temporal_refine(&mat(&z), 8, 3, 4, &store, "tam", 2, 2, 0.2);
    assert!(max_abs_diff(out.data(), &flatten(&expect)) <= 1e-10);
}

#[test]
fn zero_beta_is_identity_for_every_chunking() {
    let (store, params) = tam(dims(4, 2, 2, 2), 0.0, 24, 0.5);
    let z = randn(&[24, 4], 25);
    for k in [1, 2, 3, 4, 6, 12] {
        assert!(refine(&store, &params, &z, 12, k).unwrap().bit_eq(&z), "K = {k}");
    }
}

#[test]
fn untrained_module_is_identity() {
    let (store, params) = tam(dims(4, 2, 2, 2), 0.2, 26, 0.0);
    let z = randn(&[16, 4], 27);
    assert!(refine(&store, &params, &z, 8, 4).unwrap().bit_eq(&z));
}

#[test]
fn earlier_chunks_ignore_later_frames() {
    let (store, params) = tam(dims(4, 2, 1, 2), 0.2, 28, 0.4);
    let z = randn(&[16, 4], 29);
    let base = refine(&store, &params, &z, 8, 4).unwrap();
    // Frames 4..7 belong to chunks 3 and 4; tokens 8.. (two per frame).
    let mut moved = z.data().to_vec();
    for v in &mut moved[8 * 4..] {
        *v += 0.75;
    }
    let out = refine(&store, &params, &Tensor::new(&[16, 4], moved).unwrap(), 8, 4).unwrap();
    assert_eq!(&out.data()[..32], &base.data()[..32]);
    assert_ne!(&out.data()[32..], &base.data()[32..]);
}

#[test]
fn change_is_bounded_by_scaled_bias() {
    let (store, params) = tam(dims(4, 2, 1, 2), 0.2, 30, 0.4);
    let z = randn(&[8, 4], 31);
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let tokens = LatentTokens::new(&tape, zv, 4, 2).unwrap();
    let mut previous = start_chunk(&mut tape, &store, &params);
    for mut chunk in split_chunks(&mut tape, &tokens, 2).unwrap() {
        chunk.conditioning = Some(previous.last_frame(&mut tape).unwrap());
        let (enhanced, bias) = refine_chunk(&mut tape, &store, &params, &previous, &chunk).unwrap();
        let before = tape.value(chunk.payload).clone();
        let after = tape.value(enhanced.payload).clone();
        let bias_inf = tape.value(bias).max_abs();
        assert!(after.max_abs_diff(&before) <= 0.2 * bias_inf + 1e-15);
        previous = enhanced;
    }
}

#[test]
fn output_converges_linearly_as_beta_vanishes() {
    let z = randn(&[8, 4], 32);
    let gap = |beta: f64| {
        let (store, params) = tam(dims(4, 2, 1, 2), beta, 33, 0.4);
        refine(&store, &params, &z, 4, 2).unwrap().max_abs_diff(&z)
    };
    let (g1, g2, g3) = (gap(1e-2), gap(1e-3), gap(1e-4));
    assert!(g1 > g2 && g2 > g3 && g3 > 0.0);
    assert!((g2 / g1 - 0.1).abs() < 0.01, "{}", g2 / g1);
    assert!((g3 / g2 - 0.1).abs() < 0.001, "{}", g3 / g2);
}

#[test]
fn tam_gradients_match_finite_differences() {
    let (store, params) = tam(dims(4, 2, 1, 2), 0.2, 34, 0.3);
    let z = randn(&[8, 4], 35);
    let target = randn(&[8, 4], 36);
    let loss = |tape: &mut Tape, s: &ParamStore| {
        let zv = tape.constant(z.clone());
        let tokens = LatentTokens::new(tape, zv, 4, 2)?;
        let out = temporal_refine(tape, s, &params, &tokens, 2)?;
        let t = tape.constant(target.clone());
        tape.mse(out.tokens, t)
    };
    let report = grad_check_store(loss, &store, |_| true, &GradCheckOptions::exhaustive(1e-5)).unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn trained_module_smooths_held_out_sequences() {
    let mut config = TrainConfig::desk();
    config.steps = 300;
    let spec = |subjects, seed| DatasetSpec {
        subjects,
        videos_per_subject: 4,
        frames: config.frames,
        tokens_per_frame: config.tokens_per_frame,
        dim: config.latent_dim,
        components: config.components,
        noise_level: 0.02,
        seed,
    };
    let train = generate_dataset(&spec(8, 1)).unwrap();
    let held = generate_dataset(&spec(2, 2)).unwrap();
    let mut trainer = Trainer::new(&config, Mode::TamOnly).unwrap();
    trainer.fit(&train, None).unwrap();
    let report = evaluate(&trainer.model, &held).unwrap();
    assert!(
        report.temporal_deviation_after < report.temporal_deviation_before,
        "{report:?}"
    );
    // The jittered inputs are rougher than the clean sequences they came from.
    let clean = held[0].latents.temporal_deviation();
    let rough = corrupt_temporal(&held[0].latents, config.jitter, 3)
        .unwrap()
        .temporal_deviation();
    assert!(rough > clean);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psi_frames_never_see_the_future(seed in any::<u64>(), cut in 0usize..4) {
        let (store, params) = tam(dims(4, 2, 2, 2), 0.2, seed, 0.3);
        let pos = [0, 0, 1, 1, 2, 2, 3, 3];
        let x = randn(&[8, 4], seed ^ 1);
        let base = psi(&store, &params, &x, &pos).unwrap();
        let noise = randn(&[8, 4], seed ^ 2);
        let moved: Vec<f64> = x.data().iter().zip(noise.data()).enumerate()
            .map(|(i, (a, b))| if pos[i / 4] > cut { a + b } else { *a })
            .collect();
        let out = psi(&store, &params, &Tensor::new(&[8, 4], moved).unwrap(), &pos).unwrap();
        let keep = 4 * pos.iter().filter(|&&p| p <= cut).count();
        prop_assert_eq!(&out.data()[..keep], &base.data()[..keep]);
    }

    #[test]
    fn refined_chunks_never_see_later_chunks(seed in any::<u64>(), from in 1usize..4) {
        let (store, params) = tam(dims(4, 1, 1, 2), 0.2, seed, 0.4);
        let z = randn(&[8, 4], seed ^ 3);
        let base = refine(&store, &params, &z, 8, 4).unwrap();
        let noise = randn(&[8, 4], seed ^ 4);
        // Chunk `from` (0-based) starts at frame 2·from.
        let cut = 2 * from * 4;
        let moved: Vec<f64> = z.data().iter().zip(noise.data()).enumerate()
            .map(|(i, (a, b))| if i >= cut { a + b } else { *a })
            .collect();
        let out = refine(&store, &params, &Tensor::new(&[8, 4], moved).unwrap(), 8, 4).unwrap();
        prop_assert_eq!(&out.data()[..cut], &base.data()[..cut]);
    }

    #[test]
    fn zero_beta_identity_holds_everywhere(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 2, 4])) {
        let (store, params) = tam(dims(4, 2, 1, 2), 0.0, seed, 0.5);
        let z = randn(&[8, 4], seed ^ 5);
        prop_assert!(refine(&store, &params, &z, 4, k).unwrap().bit_eq(&z));
    }
}

//! Acceptance suite. Each criterion runs at its stated tolerance and time
//! budget and prints one PASS or FAIL line; the process fails if any does.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use clap::Parser;
use tdnnf_nas::cli;
use tdnnf_nas::data::{split_heldout, Dataset, Sequence, SyntheticTaskSpec, TaskKind};
use tdnnf_nas::lattice::{build_lattice, k_best, ChoiceGroup, NasLattice};
use tdnnf_nas::layer::{candidate_param_count, FactoredLayer, LayerChoice};
use tdnnf_nas::numeric::{central_difference, streams, Rng, SeqTensor};
use tdnnf_nas::oracle::{brute_force_rank, compare_nas_to_oracle, enumerate_candidates, DEFAULT_CAP};
use tdnnf_nas::search::{
    anneal_temperature, arch_objective, gumbel_lambda_with_noise, run_search, Method, NasConfig, PenaltyTable,
    PenaltyUnit, Relaxation, SearchData, SearchRun, SearchState, Stage, TemperatureSchedule,
};
use tdnnf_nas::supernet::{
    extract_network, gates_for_candidate, gates_for_network, network_param_count, sample_onehot_uniform,
    ArchitectureWeights, Attribute, CandidateArchitecture, LayerLambdas, NetworkShape, SearchSpaceSpec,
    SuperNetwork,
};
use tdnnf_nas::train::{retrain_candidate, Checkpoint, TrainConfig};

type Check = fn() -> Result<String, String>;

fn main() {
    let criteria: [(&str, Duration, Check); 12] = [
        ("gradient fidelity", secs(60), gradient_fidelity),
        ("mixture equivalence", secs(10), mixture_equivalence),
        ("extraction soundness", secs(60), extraction_soundness),
        ("lattice exactness", secs(10), lattice_exactness),
        ("semi-orthogonality", secs(60), semi_orthogonality),
        ("gumbel sharpening", secs(60), gumbel_sharpening),
        ("pipelined stage separation", secs(60), stage_separation),
        ("penalty behaviour", secs(20 * 60), penalty_behaviour),
        ("planted-context recovery", secs(15 * 60), planted_context),
        ("planted-rank recovery", secs(15 * 60), planted_rank),
        ("oracle agreement", secs(30 * 60), oracle_agreement),
        ("reproducibility", secs(10 * 60), reproducibility),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let label = format!("criterion {:>2}: {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > *budget => Err(format!("{d}; took {elapsed:.1?}, budget {budget:?}")),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {label} ({detail}) [{elapsed:.1?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {label} ({detail}) [{elapsed:.1?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_weights(space: &SearchSpaceSpec, rng: &mut Rng) -> ArchitectureWeights {
    let mut w = ArchitectureWeights::zeros(space);
    let flat: Vec<f64> = w.to_flat().iter().map(|_| rng.draw_normal()).collect();
    w.set_flat(&flat).unwrap();
    w
}

fn random_input(frames: usize, dim: usize, rng: &mut Rng) -> SeqTensor {
    SeqTensor::from_vec(frames, dim, (0..frames * dim).map(|_| rng.draw_normal()).collect()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------------------
// 1. Analytic log α gradients against central differences of the penalized loss.

/// A small random search problem: space, network, weights, one batch of data.
fn random_problem(rng: &mut Rng) -> (SuperNetwork, ArchitectureWeights, Dataset) {
    let pool = [1, 2, 3, 4];
    let mut dims: Vec<usize> = pool.iter().copied().filter(|_| rng.below(2) == 0).collect();
    if dims.is_empty() {
        dims.push(pool[rng.below(4)]);
    }
    let search_contexts = rng.below(3) > 0;
    let search_dims = !search_contexts || rng.below(2) == 0;
    let space = SearchSpaceSpec::new(
        1 + rng.below(2),
        rng.below(3),
        rng.below(3),
        dims,
        search_contexts,
        search_dims,
    )
    .unwrap();
    let shape = NetworkShape {
        input_dim: 2 + rng.below(2),
        hidden_dim: 3 + rng.below(2),
        num_classes: 2 + rng.below(2),
    };
    let net = SuperNetwork::new(space.clone(), shape, rng).unwrap();
    let weights = random_weights(&space, rng);
    let data = SyntheticTaskSpec {
        kind: TaskKind::Context,
        num_sequences: 2,
        frames: 4 + rng.below(3),
        feature_dim: shape.input_dim,
        num_classes: shape.num_classes,
        left_offset: 1,
        right_offset: 1,
        seed: rng.next_u64(),
        ..SyntheticTaskSpec::default()
    }
    .generate()
    .unwrap();
    (net, weights, data)
}

/// Gradients whose norm is below this are at the round-off floor of the
/// difference quotient (about `1e-16 · |L| / h ≈ 1e-11`), so a relative error
/// of 1e-5 cannot be resolved there.
const FD_RESOLUTION: f64 = 1e-5;

fn gradient_fidelity() -> Result<String, String> {
    const CONFIGS: usize = 50;
    let methods = [Method::Softmax, Method::Gumbel, Method::PipeSoftmax, Method::PipeGumbel];
    let mut rng = Rng::new(1, 100);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut unresolved = 0usize;
    for method in methods {
        let mut resolved = 0;
        while resolved < CONFIGS {
            let (net, w, data) = random_problem(&mut rng);
            let flat = w.to_flat();
            let samples = if method.uses_gumbel() { 1 + rng.below(3) } else { 0 };
            let noise: Vec<Vec<f64>> = (0..samples).map(|_| flat.iter().map(|_| rng.draw_gumbel()).collect()).collect();
            let temperature = 0.03 + 0.97 * rng.draw_uniform();
            let relax = if method.uses_gumbel() {
                Relaxation::Gumbel {
                    noise: &noise,
                    temperature,
                }
            } else {
                Relaxation::Softmax
            };
            let unit = if rng.below(2) == 0 { PenaltyUnit::Params } else { PenaltyUnit::LayerFraction };
            let eta = match unit {
                PenaltyUnit::Params => 0.01 * rng.draw_uniform(),
                PenaltyUnit::LayerFraction => rng.draw_uniform(),
            };
            let table = ok(PenaltyTable::compute(&net.space, net.shape, &w, unit))?;
            let batch: Vec<&Sequence> = data.sequences.iter().collect();
            let obj = ok(arch_objective(&net, &w, &batch, relax, Some(&table), eta))?;
            let f = |x: &[f64]| {
                let mut w2 = w.clone();
                w2.set_flat(x).unwrap();
                arch_objective(&net, &w2, &batch, relax, Some(&table), eta).unwrap().loss
            };
            let fd = (0..flat.len())
                .map(|i| ok(central_difference(f, &flat, i, 1e-5)))
                .collect::<Result<Vec<f64>, String>>()?;
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = norm(&obj.arch_grad).max(norm(&fd));
            if scale < FD_RESOLUTION {
                unresolved += 1;
                continue;
            }
            // Entry-wise relative error, with the gradient norm as the floor of
            // the denominator so that near-zero entries are judged on scale.
            for (i, (a, b)) in obj.arch_grad.iter().zip(&fd).enumerate() {
                let err = (a - b).abs() / a.abs().max(b.abs()).max(scale);
                worst = worst.max(err);
                ensure(err < 1e-5, || format!("{} config {resolved} entry {i}: analytic {a} vs fd {b}", method.name()))?;
            }
            checked += 1;
            resolved += 1;
        }
    }
    Ok(format!(
        "{checked} configs over 4 methods, max relative error {worst:.2e}; {unresolved} saturated configs below FD resolution skipped"
    ))
}

// ---------------------------------------------------------------------------
// 2. Gated forward against an explicit sum over every candidate.

/// Output of one candidate layer computed directly from the shared blocks:
/// `z_t = B_0 x_t + B_c x_{t-c}` over the first `n` rows,
/// `y_t = A_0 z_t + A_r z_{t+r} + b` over the first `n` columns.
fn naive_candidate_layer(layer: &FactoredLayer, c: usize, r: usize, n: usize, x: &SeqTensor) -> Vec<Vec<f64>> {
    let frames = x.frames();
    let at = |t: usize, o: isize| (t as isize + o).clamp(0, frames as isize - 1) as usize;
    let mut lefts = vec![0];
    if c > 0 {
        lefts.push(c);
    }
    let mut rights = vec![0];
    if r > 0 {
        rights.push(r);
    }
    let z: Vec<Vec<f64>> = (0..frames)
        .map(|t| {
            (0..n)
                .map(|k| {
                    lefts
                        .iter()
                        .map(|&o| {
                            let w = layer.linear[o].weight.row(k);
                            let src = x.frame(at(t, -(o as isize)));
                            w.iter().zip(src).map(|(a, b)| a * b).sum::<f64>()
                        })
                        .sum()
                })
                .collect()
        })
        .collect();
    (0..frames)
        .map(|t| {
            (0..layer.out_dim())
                .map(|j| {
                    let mut acc = layer.bias[j];
                    for &o in &rights {
                        let w = &layer.affine[o].weight;
                        let src = &z[at(t, o as isize)];
                        for (k, s) in src.iter().enumerate().take(n) {
                            acc += w.get(j, k) * s;
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn naive_mixture(net: &SuperNetwork, lambdas: &[LayerLambdas], x: &SeqTensor) -> Vec<Vec<f64>> {
    let sp = &net.space;
    let mut h = x.clone();
    for (layer, lam) in net.layers.iter().zip(lambdas) {
        let mut acc = vec![vec![0.0; layer.out_dim()]; h.frames()];
        for c in 0..=sp.d_left {
            for r in 0..=sp.d_right {
                for (i, &n) in sp.dim_choices.iter().enumerate() {
                    let w = lam.left.as_ref().unwrap()[c] * lam.right.as_ref().unwrap()[r] * lam.dim.as_ref().unwrap()[i];
                    let y = naive_candidate_layer(layer, c, r, n, &h);
                    for (a, b) in acc.iter_mut().flatten().zip(y.iter().flatten()) {
                        *a += w * b;
                    }
                }
            }
        }
        let flat: Vec<f64> = acc.iter().flatten().map(|v| v.max(0.0)).collect();
        h = SeqTensor::from_vec(acc.len(), layer.out_dim(), flat).unwrap();
    }
    let cls = &net.classifier;
    (0..h.frames())
        .map(|t| {
            (0..cls.bias.len())
                .map(|k| cls.bias[k] + cls.weight.row(k).iter().zip(h.frame(t)).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        })
        .collect()
}

fn mixture_equivalence() -> Result<String, String> {
    let space = ok(SearchSpaceSpec::new(2, 2, 2, vec![2, 3], true, true))?;
    let shape = NetworkShape {
        input_dim: 3,
        hidden_dim: 4,
        num_classes: 3,
    };
    let mut rng = Rng::new(2, 100);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let net = ok(SuperNetwork::new(space.clone(), shape, &mut rng))?;
        let lambdas = ok(random_weights(&space, &mut rng).softmax_lambdas())?;
        let x = random_input(7, 3, &mut rng);
        let (gated, _) = ok(net.forward(&ok(gates_for_network(&lambdas, &space))?, &x))?;
        let naive = naive_mixture(&net, &lambdas, &x);
        for (a, b) in gated.data().iter().zip(naive.iter().flatten()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-10, || format!("max abs diff {worst:e}"))?;
    Ok(format!("20 nets, 3x3x2 choices, max abs diff {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 3. One-hot super-network forward against the extracted standalone network.

fn extraction_soundness() -> Result<String, String> {
    let space = ok(SearchSpaceSpec::new(3, 3, 2, vec![1, 3, 5], true, true))?;
    let shape = NetworkShape {
        input_dim: 4,
        hidden_dim: 6,
        num_classes: 3,
    };
    let mut rng = Rng::new(3, 100);
    let net = ok(SuperNetwork::new(space.clone(), shape, &mut rng))?;
    let x = random_input(9, 4, &mut rng);
    for k in 0..100 {
        let cand = sample_onehot_uniform(&space, &mut rng);
        let (a, _) = ok(net.forward(&ok(gates_for_candidate(&space, &cand))?, &x))?;
        let ext = ok(extract_network(&net, &cand))?;
        let b = ok(ext.forward(&x))?;
        ensure(a.data() == b.data(), || format!("candidate {k} differs: {cand:?}"))?;
        for (l, (layer, &choice)) in ext.layers.iter().zip(&cand.layers).enumerate() {
            let scalars: usize = layer
                .linear
                .iter()
                .chain(&layer.affine)
                .map(|blk| blk.weight.len())
                .sum::<usize>()
                + layer.bias.len();
            let expected = candidate_param_count(&net.layers[l], choice, &space.dim_choices);
            ensure(scalars == expected, || format!("candidate {k} layer {l}: {scalars} vs {expected}"))?;
        }
        let total = ext.param_count();
        let expected = network_param_count(&cand, &space, shape);
        ensure(total == expected, || format!("candidate {k}: network {total} vs {expected}"))?;
    }
    Ok("100 candidates bit-identical, counts exact".into())
}

// ---------------------------------------------------------------------------
// 4. k-best against exhaustive enumeration.

fn lattice_exactness() -> Result<String, String> {
    // Worked value: best path 0.7 · 0.8.
    let space = ok(SearchSpaceSpec::new(1, 2, 2, vec![4], true, false))?;
    let groups = vec![
        ChoiceGroup {
            layer: 0,
            attr: Attribute::Left,
            arcs: vec![(0, 0.1), (1, 0.7), (2, 0.2)],
        },
        ChoiceGroup {
            layer: 0,
            attr: Attribute::Right,
            arcs: vec![(0, 0.8), (1, 0.15), (2, 0.05)],
        },
    ];
    let lat = ok(NasLattice::from_groups(&space, groups))?;
    let best = ok(k_best(&lat, 1))?;
    ensure(best[0].0.layers[0] == LayerChoice::new(1, 0, 0), || format!("worked example picked {:?}", best[0].0))?;
    ensure((best[0].1 - 0.56).abs() < 1e-15, || format!("worked example prob {}", best[0].1))?;

    let spaces = [
        ok(SearchSpaceSpec::new(1, 3, 3, vec![1, 2], true, true))?,
        ok(SearchSpaceSpec::new(2, 2, 2, vec![1, 2, 3], true, true))?,
        ok(SearchSpaceSpec::new(2, 4, 4, vec![1, 2, 3, 4], true, true))?,
        ok(SearchSpaceSpec::new(2, 9, 9, vec![1], true, false))?,
    ];
    let mut rng = Rng::new(4, 100);
    let mut largest = 0;
    for space in &spaces {
        let w = random_weights(space, &mut rng);
        let lambdas = ok(w.softmax_lambdas())?;
        // Exhaustive list, product taken in group order, ties broken by the
        // lexicographic order of the enumeration.
        let mut all: Vec<(CandidateArchitecture, f64)> = ok(enumerate_candidates(space, 10_000))?
            .into_iter()
            .map(|c| {
                let p = space
                    .groups()
                    .iter()
                    .map(|&(l, a)| lambdas[l].get(a).unwrap()[a.of(&c.layers[l])])
                    .product();
                (c, p)
            })
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1));
        largest = largest.max(all.len());
        let got = ok(k_best(&ok(build_lattice(&w, space))?, all.len()))?;
        ensure(got.len() == all.len(), || format!("{} of {} paths", got.len(), all.len()))?;
        for (k, ((gc, gp), (ec, ep))) in got.iter().zip(&all).enumerate() {
            ensure(gc == ec && gp == ep, || format!("rank {k}: {gc:?} {gp} vs {ec:?} {ep}"))?;
        }
    }
    Ok(format!("0.7*0.8 = 0.56 exact; full orderings match up to {largest} paths"))
}

// ---------------------------------------------------------------------------
// 5. Semi-orthogonal constraint steps.

fn semi_orthogonality() -> Result<String, String> {
    let mut rng = Rng::new(5, 100);
    let mut worst_ratio = 0.0f64;
    for k in 0..100 {
        // Factored-layer shapes: the bottleneck is at most half the spliced
        // input width, and wider than one row (a single row is trivially
        // orthogonal).
        let in_dim = 2 + rng.below(5);
        let d_left = 1 + rng.below(2);
        let cols = in_dim * (d_left + 1);
        let n = 2 + rng.below(cols / 2 - 1);
        let mut layer = FactoredLayer::random(in_dim, 2 + rng.below(5), n, d_left, rng.below(3), &mut rng);
        let initial = layer.orthogonality_residual();
        let mut prev = initial;
        for step in 0..10 {
            ok(layer.semi_orthogonal_step())?;
            let r = layer.orthogonality_residual();
            // Once at round-off level the residual jitters around 1e-16 · ‖P‖.
            ensure(r <= prev || r < 1e-12 * initial, || {
                format!("layer {k} step {step}: residual rose {prev:e} -> {r:e}")
            })?;
            prev = r;
        }
        worst_ratio = worst_ratio.max(prev / initial);
        ensure(prev < 1e-3 * initial, || format!("layer {k}: final/initial {:e}", prev / initial))?;
    }
    Ok(format!("100 layers, worst final/initial {worst_ratio:.2e}"))
}

// ---------------------------------------------------------------------------
// 6. Temperature sharpens Gumbel-Softmax weights.

fn gumbel_sharpening() -> Result<String, String> {
    let mut rng = Rng::new(6, 100);
    for k in 0..100 {
        let n = 2 + rng.below(6);
        let logits: Vec<f64> = (0..n).map(|_| rng.draw_normal()).collect();
        let noise: Vec<f64> = (0..n).map(|_| rng.draw_gumbel()).collect();
        let hot = ok(gumbel_lambda_with_noise(&logits, &noise, 1.0))?;
        let cold = ok(gumbel_lambda_with_noise(&logits, &noise, 0.03))?;
        let max = |v: &[f64]| v.iter().copied().fold(f64::MIN, f64::max);
        ensure(max(&cold) > max(&hot), || format!("case {k}: {} <= {}", max(&cold), max(&hot)))?;
    }
    let schedule = TemperatureSchedule::default();
    ensure(ok(anneal_temperature(schedule, 0, 37))? == 1.0, || "start is not 1.0".into())?;
    ensure(ok(anneal_temperature(schedule, 37, 37))? == 0.03, || "end is not 0.03".into())?;

    // The schedule a pipelined Gumbel search actually follows.
    let (_, train, held) = rank_task(1, 40, 3, 3, 2, 0.05);
    let nas = NasConfig {
        method: Method::PipeGumbel,
        search_epochs: 1,
        stage2_epochs: 2,
        ..NasConfig::default()
    };
    let cfg = TrainConfig::default();
    let run = ok(SearchRun::new(&nas, &cfg, SearchData { train: &train, heldout: Some(&held) }))?;
    let net = ok(SuperNetwork::new(rank_space(vec![1, 2, 3]), rank_shape(3, 3, 4), &mut Rng::new(1, streams::INIT)))?;
    let mut state = SearchState::new(net, &cfg);
    let mut temps = Vec::new();
    while state.step < run.total_steps() {
        let rep = ok(run.step(&mut state))?;
        if rep.stage == Stage::Arch {
            temps.push(rep.temperature);
        }
    }
    ensure(temps.len() >= 2, || "too few stage-2 steps".into())?;
    ensure(temps[0] == 1.0 && *temps.last().unwrap() == 0.03, || {
        format!("search ran from {} to {}", temps[0], temps.last().unwrap())
    })?;
    ensure(temps.windows(2).all(|w| w[1] < w[0]), || "temperature is not decreasing".into())?;
    Ok(format!("100 cases sharpen; endpoints 1.0 and 0.03 exact over {} steps", temps.len()))
}

// ---------------------------------------------------------------------------
// 7. Pipelined stages touch disjoint parameters; held-out share is exact.

fn rank_task(seed: u64, n: usize, d: usize, k: usize, rank: usize, frac: f64) -> (Dataset, Dataset, Dataset) {
    let data = SyntheticTaskSpec {
        kind: TaskKind::Rank,
        num_sequences: n,
        frames: 20,
        feature_dim: d,
        num_classes: k,
        rank,
        noise: 0.1,
        seed,
        ..SyntheticTaskSpec::default()
    }
    .generate()
    .unwrap();
    let (train, held) = split_heldout(&data, frac, &mut Rng::new(seed, streams::SPLIT)).unwrap();
    (data, train, held)
}

fn rank_space(dims: Vec<usize>) -> SearchSpaceSpec {
    SearchSpaceSpec::new(1, 0, 0, dims, false, true).unwrap()
}

fn rank_shape(d: usize, k: usize, hidden: usize) -> NetworkShape {
    NetworkShape {
        input_dim: d,
        hidden_dim: hidden,
        num_classes: k,
    }
}

fn stage_separation() -> Result<String, String> {
    let mut steps = 0;
    for method in [Method::PipeSoftmax, Method::PipeGumbel] {
        let (_, train, held) = rank_task(7, 60, 3, 3, 2, 0.05);
        let nas = NasConfig {
            method,
            eta: 0.1,
            search_epochs: 2,
            stage2_epochs: 2,
            ..NasConfig::default()
        };
        let cfg = TrainConfig::default();
        let run = ok(SearchRun::new(&nas, &cfg, SearchData { train: &train, heldout: Some(&held) }))?;
        let space = ok(SearchSpaceSpec::new(2, 1, 1, vec![1, 2], true, true))?;
        let net = ok(SuperNetwork::new(space, rank_shape(3, 3, 4), &mut Rng::new(7, streams::INIT)))?;
        let mut state = SearchState::new(net, &cfg);
        let mut layer_steps = 0;
        while state.step < run.total_steps() {
            let before = state.clone();
            let rep = ok(run.step(&mut state))?;
            match rep.stage {
                Stage::Layers => {
                    layer_steps += 1;
                    ensure(state.weights == before.weights, || format!("stage 1 step {} moved log α", rep.step))?;
                    ensure(state.net != before.net, || format!("stage 1 step {} left layers unchanged", rep.step))?;
                }
                Stage::Arch => {
                    ensure(layer_steps > 0, || "stage 2 ran before stage 1".into())?;
                    ensure(state.net == before.net, || format!("stage 2 step {} moved layers", rep.step))?;
                    ensure(state.momenta == before.momenta, || format!("stage 2 step {} moved momenta", rep.step))?;
                }
                Stage::Joint => return Err("pipelined run scheduled a joint step".into()),
            }
            steps += 1;
        }
    }
    let frac = NasConfig::default().heldout_fraction;
    for n in [20, 100, 200, 1000] {
        let (full, train, held) = rank_task(n as u64, n, 2, 2, 1, frac);
        ensure(held.len() * 20 == n, || format!("{} of {n} held out", held.len()))?;
        ensure(train.len() + held.len() == n, || "split lost sequences".into())?;
        let mut rejoined: Vec<_> = train.sequences.iter().chain(&held.sequences).map(|s| s.labels.clone()).collect();
        let mut original: Vec<_> = full.sequences.iter().map(|s| s.labels.clone()).collect();
        rejoined.sort();
        original.sort();
        ensure(rejoined == original, || "split is not a partition".into())?;
    }
    Ok(format!("{steps} steps checked; held-out exactly 5% for N in 20, 100, 200, 1000"))
}

// ---------------------------------------------------------------------------
// 8-10. Planted-structure searches.

/// Planted rank 2 in 8 features, 6 classes, one layer with dims {1, 2, 4, 8}.
struct RankRun {
    space: SearchSpaceSpec,
    shape: NetworkShape,
    train: Dataset,
    held: Dataset,
    cfg: TrainConfig,
}

impl RankRun {
    fn new(seed: u64, dims: Vec<usize>, layers: usize) -> Self {
        let (_, train, held) = rank_task(seed, 1000, 8, 6, 2, 0.05);
        RankRun {
            space: SearchSpaceSpec::new(layers, 0, 0, dims, false, true).unwrap(),
            shape: rank_shape(8, 6, 16),
            train,
            held,
            cfg: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
        }
    }

    fn search(&self, nas: &NasConfig) -> Result<ArchitectureWeights, String> {
        let net = ok(SuperNetwork::new(
            self.space.clone(),
            self.shape,
            &mut Rng::new(self.cfg.seed, streams::INIT),
        ))?;
        let data = SearchData {
            train: &self.train,
            heldout: Some(&self.held),
        };
        Ok(ok(run_search(net, data, nas, &self.cfg))?.state.weights)
    }

    fn top1(&self, nas: &NasConfig) -> Result<CandidateArchitecture, String> {
        let w = self.search(nas)?;
        Ok(tdnnf_nas::search::current_choice(&self.space, &w))
    }

    fn retrained_loss(&self, cand: &CandidateArchitecture) -> Result<f64, String> {
        Ok(ok(retrain_candidate(cand, &self.space, self.shape, &self.train, &self.held, &self.cfg))?.val_loss)
    }
}

fn penalty_behaviour() -> Result<String, String> {
    // A dominating penalty picks the cheapest choice of every group.
    let (_, train, held) = rank_task(8, 60, 3, 3, 2, 0.05);
    let space = ok(SearchSpaceSpec::new(2, 2, 2, vec![1, 2, 4], true, true))?;
    for method in [Method::Softmax, Method::Gumbel, Method::PipeSoftmax, Method::PipeGumbel] {
        for unit in [PenaltyUnit::Params, PenaltyUnit::LayerFraction] {
            let nas = NasConfig {
                method,
                eta: 1e6,
                penalty_unit: unit,
                search_epochs: 1,
                stage2_epochs: 1,
                ..NasConfig::default()
            };
            let net = ok(SuperNetwork::new(space.clone(), rank_shape(3, 3, 4), &mut Rng::new(8, streams::INIT)))?;
            let data = if method.is_pipelined() {
                SearchData { train: &train, heldout: Some(&held) }
            } else {
                SearchData { train: &train, heldout: None }
            };
            let top = ok(run_search(net, data, &nas, &TrainConfig::default()))?.top1();
            ensure(top.layers.iter().all(|&c| c == LayerChoice::new(0, 0, 0)), || {
                format!("{} with {unit:?}: {top:?}", method.name())
            })?;
        }
    }

    // Median selected size over seeds does not grow with η.
    let etas = [0.0, 0.1, 1.0];
    let mut medians = Vec::new();
    for &eta in &etas {
        let mut params = Vec::new();
        for seed in 0..5 {
            let run = RankRun::new(seed, vec![1, 2, 4, 8], 1);
            let nas = NasConfig {
                method: Method::PipeSoftmax,
                eta,
                ..NasConfig::default()
            };
            let top = run.top1(&nas)?;
            params.push(network_param_count(&top, &run.space, run.shape) as f64);
        }
        medians.push(median(params));
    }
    ensure(medians.windows(2).all(|w| w[1] <= w[0]), || format!("medians {medians:?} for eta {etas:?}"))?;
    Ok(format!("eta 1e6 picks minimum for 4 methods x 2 units; medians {medians:?} for eta {etas:?}"))
}

fn planted_context() -> Result<String, String> {
    let space = ok(SearchSpaceSpec::new(1, 4, 4, vec![8], true, false))?;
    let mut picks = Vec::new();
    let mut hits = 0;
    for seed in 0..5 {
        let data = ok(SyntheticTaskSpec {
            kind: TaskKind::Context,
            num_sequences: 2000,
            frames: 20,
            feature_dim: 4,
            num_classes: 4,
            left_offset: 2,
            right_offset: 3,
            seed,
            ..SyntheticTaskSpec::default()
        }
        .generate())?;
        let nas = NasConfig {
            method: Method::PipeGumbel,
            ..NasConfig::default()
        };
        let (train, held) = ok(split_heldout(&data, nas.heldout_fraction, &mut Rng::new(seed, streams::SPLIT)))?;
        let shape = rank_shape(4, 4, 16);
        let net = ok(SuperNetwork::new(space.clone(), shape, &mut Rng::new(seed, streams::INIT)))?;
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let out = ok(run_search(net, SearchData { train: &train, heldout: Some(&held) }, &nas, &cfg))?;
        let c = out.top1().layers[0];
        if (c.left, c.right) == (2, 3) {
            hits += 1;
        }
        picks.push(format!("(-{},+{})", c.left, c.right));
    }
    ensure(hits >= 4, || format!("{hits}/5 seeds recovered (-2,+3): {}", picks.join(" ")))?;
    Ok(format!("{hits}/5 seeds recovered (-2,+3): {}", picks.join(" ")))
}

fn planted_rank() -> Result<String, String> {
    let mut hits = 0;
    let mut notes = Vec::new();
    for seed in 0..5 {
        let run = RankRun::new(seed, vec![1, 2, 4, 8], 1);
        let nas = NasConfig {
            method: Method::PipeSoftmax,
            eta: 0.1,
            ..NasConfig::default()
        };
        let top = run.top1(&nas)?;
        let dim = run.space.dim_choices[top.layers[0].dim_index];
        let loss = run.retrained_loss(&top)?;
        let full = run.retrained_loss(&CandidateArchitecture {
            layers: vec![LayerChoice::new(0, 0, 3)],
        })?;
        if (dim == 2 || dim == 4) && loss <= 1.1 * full {
            hits += 1;
        }
        notes.push(format!("dim {dim} loss {loss:.3}/{full:.3}"));
    }
    ensure(hits >= 4, || format!("{hits}/5 seeds: {}", notes.join(", ")))?;
    Ok(format!("{hits}/5 seeds: {}", notes.join(", ")))
}

// ---------------------------------------------------------------------------
// 11. Search ranking against exhaustive retraining.

fn oracle_agreement() -> Result<String, String> {
    let mut rhos = Vec::new();
    let mut hits = 0;
    let mut ranks = Vec::new();
    for seed in 0..5 {
        let run = RankRun::new(seed, vec![1, 2, 4], 2);
        let nas = NasConfig {
            method: Method::PipeSoftmax,
            ..NasConfig::default()
        };
        let w = run.search(&nas)?;
        let report = ok(brute_force_rank(&run.space, run.shape, &run.train, &run.held, &run.cfg, DEFAULT_CAP))?;
        ensure(report.entries.len() == 9, || format!("{} candidates", report.entries.len()))?;
        let cmp = ok(compare_nas_to_oracle(&w, &run.space, &report))?;
        let rank = cmp.nas_top1_oracle_rank.unwrap();
        if rank <= 3 {
            hits += 1;
        }
        ranks.push(rank);
        rhos.push(cmp.spearman.unwrap());
    }
    let rho = median(rhos.clone());
    ensure(rho >= 0.5 && hits >= 4, || {
        format!("median spearman {rho:.3} ({rhos:.3?}), top-1 oracle ranks {ranks:?}")
    })?;
    Ok(format!("median spearman {rho:.3}, top-1 oracle ranks {ranks:?}"))
}

// ---------------------------------------------------------------------------
// 12. Bit-identical reruns and resumption.

const SMALL_CONFIG: &str = r#"
[space]
num_layers = 2
d_left = 1
d_right = 1
dim_choices = 1, 2
hidden_dim = 4

[search]
method = "pipe-gumbel"
eta = 0.1
search_epochs = 1
stage2_epochs = 2
top_n = 2
oracle_cap = 100

[train]
epochs = 1
seed = 3

[data]
task = "context"
num_sequences = 40
frames = 8
feature_dim = 3
num_classes = 3
left_offset = 1
right_offset = 1
"#;

fn run_pipeline(config: &std::path::Path, out: &std::path::Path) -> Result<(), String> {
    for cmd in ["gen-data", "search", "extract", "retrain", "oracle", "report"] {
        let argv = ["tdnnf-nas", cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
        let parsed = ok(cli::Cli::try_parse_from(argv))?;
        cli::execute(&parsed.command).map_err(|e| format!("`{cmd}` failed: {e}"))?;
    }
    Ok(())
}

fn reproducibility() -> Result<String, String> {
    let dir = ok(tempfile::tempdir())?;
    let config = dir.path().join("run.cfg");
    ok(std::fs::write(&config, SMALL_CONFIG))?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_pipeline(&config, &a)?;
    run_pipeline(&config, &b)?;
    // A third run into an existing directory overwrites in place.
    run_pipeline(&config, &a)?;
    let mut names: Vec<String> = ok(std::fs::read_dir(&a))?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let expected = [
        "dataset.synd",
        "lambda_trajectory.csv",
        "oracle.csv",
        "report.txt",
        "retrain_1.tdnf",
        "retrain_2.tdnf",
        "supernet.tdnf",
        "topN.txt",
    ];
    ensure(names == expected, || format!("artifacts {names:?}"))?;
    for name in &names {
        let (x, y) = (ok(std::fs::read(a.join(name)))?, ok(std::fs::read(b.join(name)))?);
        ensure(x == y, || format!("{name} differs between runs"))?;
    }

    // Stopping mid-search, saving to disk and resuming equals a straight run.
    let mut resumed_runs = 0;
    for method in [Method::Softmax, Method::Gumbel, Method::PipeSoftmax, Method::PipeGumbel] {
        let (full, train, held) = rank_task(12, 40, 3, 3, 2, 0.05);
        let nas = NasConfig {
            method,
            eta: 0.1,
            search_epochs: 2,
            stage2_epochs: 2,
            ..NasConfig::default()
        };
        let cfg = TrainConfig {
            batch_size: 4,
            seed: 12,
            ..TrainConfig::default()
        };
        let data = if method.is_pipelined() {
            SearchData { train: &train, heldout: Some(&held) }
        } else {
            SearchData { train: &full, heldout: None }
        };
        let run = ok(SearchRun::new(&nas, &cfg, data))?;
        let space = ok(SearchSpaceSpec::new(2, 1, 1, vec![1, 2], true, true))?;
        let fresh = || SearchState::new(SuperNetwork::new(space.clone(), rank_shape(3, 3, 4), &mut Rng::new(12, streams::INIT)).unwrap(), &cfg);
        let mut straight = fresh();
        ok(run.run_from(&mut straight, &mut Vec::new()))?;
        for cut in [1, run.total_steps() / 3, run.total_steps() / 2, run.total_steps() - 1] {
            let mut first = fresh();
            ok(run.run_until(&mut first, cut, &mut Vec::new()))?;
            let path = dir.path().join(format!("resume_{}_{cut}.tdnf", method.name()));
            ok(first.to_checkpoint().save(&path))?;
            let mut resumed = ok(SearchState::from_checkpoint(&ok(Checkpoint::load(&path))?))?;
            ok(run.run_from(&mut resumed, &mut Vec::new()))?;
            ensure(resumed.to_checkpoint().encode() == straight.to_checkpoint().encode(), || {
                format!("{} resumed at step {cut} diverged", method.name())
            })?;
            resumed_runs += 1;
        }
    }
    Ok(format!("{} artifacts bit-identical; {resumed_runs} resumed searches bit-exact", names.len()))
}

//! Acceptance gate. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero if any required criterion fails.
//!
//! Set `DBGC_FLEVOLAND_DIR` to a T3 scene directory (nine channel files,
//! `header.json`, `labels.bin`) to run the real-data check as well.

use std::collections::VecDeque;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use dbgc_core::cnn::{cnn_forward, CnnConfig, CnnParams, Patch};
use dbgc_core::fusion::{cross_entropy, cross_entropy_grad, softmax};
use dbgc_core::gat::{Activation, GatLayer, HeadMode};
use dbgc_core::graph::{Adjacency, SuperpixelGraph};
use dbgc_core::graphmae::{forward_reconstruct, loss_and_grad, mask_nodes, sce_loss, GraphMaeConfig, GraphMaeParams};
use dbgc_core::metrics::Metrics;
use dbgc_core::nn::Parameters;
use dbgc_core::pipeline::{method_name, run_experiment, DataSource, PipelineConfig};
use dbgc_core::polsar::{pauli_rgb, synth_scene, SceneSpec, CHANNELS};
use dbgc_core::slic::{slic_segment, SlicParams, SuperpixelSegmentation};
use image::{Rgb, RgbImage};
use ndarray::{array, s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Verdict {
    let start = Instant::now();
    let out = f();
    let took = start.elapsed();
    let over = limit.is_some_and(|l| took > l);
    match out {
        Ok(detail) if !over => Verdict::Pass(format!("{detail} [{:.1}s]", took.as_secs_f64())),
        Ok(detail) => Verdict::Fail(format!(
            "{detail}; took {:.1}s, limit {:.0}s",
            took.as_secs_f64(),
            limit.unwrap().as_secs_f64()
        )),
        Err(e) => Verdict::Fail(format!("{e} [{:.1}s]", took.as_secs_f64())),
    }
}

// ---------------------------------------------------------------------------
// 1. SCE closed forms

fn sce_suite() -> Outcome {
    let x = array![[1.0, 2.0, -0.5, 0.0], [0.0, -1.0, 3.0, 2.0], [4.0, 0.0, 0.0, 1.0]];
    // rows orthogonal to the matching rows of x
    let ortho = array![[-2.0, 1.0, 0.0, 7.0], [5.0, 2.0, 0.0, 1.0], [0.0, 3.0, -1.0, 0.0]];
    for i in 0..3 {
        let dot: f64 = x.row(i).dot(&ortho.row(i));
        ensure(dot == 0.0, || format!("fixture row {i} not orthogonal"))?;
    }
    let gamma = 3.0;
    let cases = [("aligned", x.clone(), 0.0), ("orthogonal", ortho.clone(), 1.0), ("anti-aligned", -&x, 8.0)];
    for (name, z, want) in cases {
        let got = sce_loss(x.view(), z.view(), gamma).map_err(|e| e.to_string())?;
        ensure((got - want).abs() <= 1e-12, || format!("{name}: {got} != {want}"))?;
    }
    let z = &ortho * 0.7 + &x * 0.3;
    let base = sce_loss(x.view(), z.view(), gamma).map_err(|e| e.to_string())?;
    for scale in [1e-3, 0.5, 2.0, 1e4] {
        let got = sce_loss(x.view(), (&z * scale).view(), gamma).map_err(|e| e.to_string())?;
        ensure((got - base).abs() <= 1e-12, || format!("scale {scale}: {got} vs {base}"))?;
    }
    Ok("0 / 1 / 8 and scale invariance exact to 1e-12".into())
}

// ---------------------------------------------------------------------------
// 2. Gradients against central differences

const FD_STEP: f64 = 1e-6;

/// Largest violation of `|a - n| <= 1e-4 * max(|a|, |n|) + 1e-8`, as a
/// relative error, over every coordinate.
fn fd_check(name: &str, base: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Result<f64, String> {
    ensure(base.len() == analytic.len(), || format!("{name}: gradient length"))?;
    let mut worst: f64 = 0.0;
    let mut v = base.to_vec();
    for i in 0..base.len() {
        v[i] = base[i] + FD_STEP;
        let up = f(&v);
        v[i] = base[i] - FD_STEP;
        let down = f(&v);
        v[i] = base[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let err = (a - numeric).abs();
        let scale = a.abs().max(numeric.abs());
        ensure(err <= 1e-4 * scale + 1e-8, || {
            format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}")
        })?;
        if scale > 1e-6 {
            worst = worst.max(err / scale);
        }
    }
    Ok(worst)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

fn gat_gradients(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let edges = [(0u32, 1u32), (1, 2), (2, 3), (3, 4), (4, 5), (0, 4), (1, 5)];
    let adj = Adjacency::new(6, &edges);
    let mut worst: f64 = 0.0;
    for (mode, act) in [
        (HeadMode::Concat, Activation::Elu),
        (HeadMode::Average, Activation::Identity),
    ] {
        let layer = GatLayer::new(rng, 5, 3, 4, mode, act);
        let x = random_matrix(rng, 6, 5);
        let probe = random_matrix(rng, 6, layer.out_dim());
        let (_, cache) = layer.forward(x.view(), &adj).map_err(|e| e.to_string())?;
        let mut grads = layer.zeroed();
        let dx = layer.backward(&cache, &adj, probe.view(), &mut grads);

        let mut q = layer.clone();
        worst = worst.max(fd_check("gat params", &layer.flatten(), &grads.flatten(), |v| {
            q.assign_flat(v);
            (&q.forward(x.view(), &adj).unwrap().0 * &probe).sum()
        })?);
        let xs: Vec<f64> = x.iter().copied().collect();
        worst = worst.max(fd_check("gat input", &xs, &dx.iter().copied().collect::<Vec<_>>(), |v| {
            let xv = Array2::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap();
            (&layer.forward(xv.view(), &adj).unwrap().0 * &probe).sum()
        })?);
    }
    Ok(worst)
}

fn reconstruct_gradients(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let x = random_matrix(rng, 6, CHANNELS);
    let g = SuperpixelGraph::new(x, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)], vec![1; 6], None)
        .map_err(|e| e.to_string())?;
    let cfg = GraphMaeConfig {
        heads: 2,
        head_dim: 3,
        encoder_layers: 3,
        ..Default::default()
    };
    let mut params = GraphMaeParams::init(&cfg, rng);
    params.enc_mask_token = random_matrix(rng, 1, CHANNELS) * 0.5;
    params.dec_mask_token = random_matrix(rng, 1, cfg.embedding_dim()) * 0.5;
    let (ratio, gamma, seed) = (0.5, 3.0, 17);
    let (_, mask_set) = forward_reconstruct(&g, &params, ratio, gamma, seed).map_err(|e| e.to_string())?;
    let (_, grads) =
        loss_and_grad(&params, g.node_features().view(), &g.adjacency(), &mask_set, gamma).map_err(|e| e.to_string())?;
    let mut q = params.clone();
    fd_check("forward_reconstruct", &params.flatten(), &grads.flatten(), |v| {
        q.assign_flat(v);
        forward_reconstruct(&g, &q, ratio, gamma, seed).unwrap().0
    })
}

fn cnn_gradients(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let cfg = CnnConfig {
        patch_size: 5,
        channels: [3, 4, 3, 2],
        out_dim: 4,
        in_channels: CHANNELS,
    };
    let mut params = CnnParams::init(&cfg, rng).map_err(|e| e.to_string())?;
    for b in &mut params.conv_bias {
        b.mapv_inplace(|_| rng.random_range(0.05..0.3));
    }
    let patches: Vec<Patch> = (0..3)
        .map(|i| Patch {
            center: (i, i),
            size: 5,
            data: (0..25 * CHANNELS).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let probe = random_matrix(rng, 3, 4);
    let input = Array2::from_shape_vec(
        (3 * 25, CHANNELS),
        patches.iter().flat_map(|p| p.data.iter().copied()).collect(),
    )
    .unwrap();
    let (_, cache) = params.forward(input.view(), 3).map_err(|e| e.to_string())?;
    let mut grads = params.zeroed();
    params.backward(&cache, probe.view(), &mut grads);
    let mut q = params.clone();
    fd_check("cnn_forward", &params.flatten(), &grads.flatten(), |v| {
        q.assign_flat(v);
        (&cnn_forward(&patches, &q).unwrap() * &probe).sum()
    })
}

fn cross_entropy_gradients(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for c in [2usize, 5, 15] {
        let z: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let class = rng.random_range(0..c);
        let analytic = cross_entropy_grad(softmax(Array1::from(z.clone()).view()).view(), class);
        worst = worst.max(fd_check("cross_entropy", &z, analytic.as_slice().unwrap(), |v| {
            cross_entropy(softmax(Array1::from(v.to_vec()).view()).view(), class)
        })?);
    }
    Ok(worst)
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let gat = gat_gradients(&mut rng)?;
    let rec = reconstruct_gradients(&mut rng)?;
    let cnn = cnn_gradients(&mut rng)?;
    let ce = cross_entropy_gradients(&mut rng)?;
    Ok(format!(
        "max rel err gat {gat:.1e}, reconstruct {rec:.1e}, cnn {cnn:.1e}, cross-entropy {ce:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 3. GAT against dense attention on every small connected graph

fn dense_attention(layer: &GatLayer, x: &Array2<f64>, n: usize, edges: &[(u32, u32)]) -> Array2<f64> {
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        adj[i][i] = true;
    }
    for &(a, b) in edges {
        adj[a as usize][b as usize] = true;
        adj[b as usize][a as usize] = true;
    }
    let f = layer.head_dim;
    let mut per_head = Vec::new();
    for k in 0..layer.heads {
        let h = x.dot(&layer.weight.slice(s![.., k * f..(k + 1) * f]));
        let mut out = Array2::<f64>::zeros((n, f));
        for i in 0..n {
            let score = |j: usize| {
                let e = layer.attn_self.row(k).dot(&h.row(i)) + layer.attn_neighbor.row(k).dot(&h.row(j));
                if e > 0.0 {
                    e
                } else {
                    0.2 * e
                }
            };
            let nbrs: Vec<usize> = (0..n).filter(|&j| adj[i][j]).collect();
            let m = nbrs.iter().map(|&j| score(j)).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = nbrs.iter().map(|&j| (score(j) - m).exp()).sum();
            for &j in &nbrs {
                let a = (score(j) - m).exp() / denom;
                out.row_mut(i).scaled_add(a, &h.row(j));
            }
        }
        per_head.push(out);
    }
    let pre = match layer.mode {
        HeadMode::Concat => {
            let mut cat = Array2::<f64>::zeros((n, layer.heads * f));
            for (k, o) in per_head.iter().enumerate() {
                cat.slice_mut(s![.., k * f..(k + 1) * f]).assign(o);
            }
            cat
        }
        HeadMode::Average => per_head.iter().fold(Array2::zeros((n, f)), |acc, o| acc + o) / layer.heads as f64,
    };
    match layer.activation {
        Activation::Elu => pre.mapv(|v| if v > 0.0 { v } else { v.exp_m1() }),
        Activation::Identity => pre,
    }
}

fn is_connected(n: usize, edges: &[(u32, u32)]) -> bool {
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(v) = queue.pop_front() {
        for &(a, b) in edges {
            let (a, b) = (a as usize, b as usize);
            for (from, to) in [(a, b), (b, a)] {
                if from == v && !seen[to] {
                    seen[to] = true;
                    queue.push_back(to);
                }
            }
        }
    }
    seen.iter().all(|&s| s)
}

fn gat_oracle_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let layers = [
        GatLayer::new(&mut rng, 4, 3, 2, HeadMode::Concat, Activation::Elu),
        GatLayer::new(&mut rng, 4, 2, 3, HeadMode::Average, Activation::Identity),
    ];
    let mut graphs = 0;
    let mut worst: f64 = 0.0;
    for n in 1..=5usize {
        let pairs: Vec<(u32, u32)> = (0..n as u32)
            .flat_map(|a| (a + 1..n as u32).map(move |b| (a, b)))
            .collect();
        for bits in 0u32..(1 << pairs.len()) {
            let edges: Vec<(u32, u32)> = pairs
                .iter()
                .enumerate()
                .filter(|(i, _)| bits >> i & 1 == 1)
                .map(|(_, &e)| e)
                .collect();
            if !is_connected(n, &edges) {
                continue;
            }
            graphs += 1;
            let x = random_matrix(&mut rng, n, 4);
            let adj = Adjacency::new(n, &edges);
            for layer in &layers {
                let (got, _) = layer.forward(x.view(), &adj).map_err(|e| e.to_string())?;
                let want = dense_attention(layer, &x, n, &edges);
                for (a, b) in got.iter().zip(&want) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    // labeled connected graphs on 1..=5 nodes: 1 + 1 + 4 + 38 + 728
    ensure(graphs == 772, || format!("enumerated {graphs} graphs"))?;
    ensure(worst <= 1e-10, || format!("max deviation {worst:e}"))?;
    Ok(format!("{graphs} graphs, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 4. Masking

fn masking_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let k = 20;
    let x = random_matrix(&mut rng, k, CHANNELS);
    let edges: Vec<(u32, u32)> = (0..k as u32 - 1).map(|i| (i, i + 1)).collect();
    let g = SuperpixelGraph::new(x.clone(), edges, vec![1; k], None).map_err(|e| e.to_string())?;
    let token = Array1::from_shape_fn(CHANNELS, |c| 100.0 + c as f64);
    for (ratio, expected) in [(0.0, 0), (0.3, 6), (0.5, 10), (1.0, 20)] {
        let m = mask_nodes(&g, ratio, token.view(), 5).map_err(|e| e.to_string())?;
        ensure(m.mask_set.len() == expected, || {
            format!("ratio {ratio}: {} masked, expected {expected}", m.mask_set.len())
        })?;
        for i in 0..k {
            let want = if m.mask_set.contains(&i) { token.view() } else { x.row(i) };
            ensure(m.masked_features.row(i) == want, || format!("ratio {ratio}: row {i} wrong"))?;
        }
    }
    Ok("counts 0/6/10/20; masked rows equal the token, others untouched".into())
}

// ---------------------------------------------------------------------------
// 5. AA from the reported per-class columns

fn metrics_suite() -> Outcome {
    let dbgc = [
        0.9875, 0.9863, 1.0000, 0.9984, 0.9721, 0.9930, 0.9636, 0.9647, 0.9711, 0.9926, 0.9651, 0.9888, 0.9435,
        0.9825, 0.9905,
    ];
    let gnn = [
        0.9456, 0.9744, 0.9851, 0.9428, 0.8610, 0.9811, 0.9807, 0.6562, 0.3690, 0.9871, 0.9807, 0.9616, 0.3355,
        0.8760, 0.9943,
    ];
    let mut lines = Vec::new();
    for (name, column, reported) in [("DB-GC", &dbgc, 0.9800), ("GNN", &gnn, 0.8554)] {
        let support = 10_000u64;
        let c = column.len();
        let confusion: Vec<Vec<u64>> = (0..c)
            .map(|i| {
                let hit = (column[i] * support as f64).round() as u64;
                let mut row = vec![0; c];
                row[i] = hit;
                row[(i + 3) % c] = support - hit;
                row
            })
            .collect();
        let m = Metrics::from_confusion(confusion).map_err(|e| e.to_string())?;
        ensure((m.aa - reported).abs() <= 1e-4, || format!("{name}: AA {} vs {reported}", m.aa))?;
        lines.push(format!("{name} AA {:.5}", m.aa));
    }
    Ok(lines.join(", "))
}

// ---------------------------------------------------------------------------
// 6. SLIC partitions

fn four_connected(seg: &SuperpixelSegmentation) -> bool {
    let (h, w) = (seg.height(), seg.width());
    let mut seen = vec![false; h * w];
    let mut components = 0;
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        components += 1;
        let label = seg.labels()[start];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / w, p % w);
            let mut nbrs = Vec::with_capacity(4);
            if r > 0 {
                nbrs.push(p - w);
            }
            if r + 1 < h {
                nbrs.push(p + w);
            }
            if c > 0 {
                nbrs.push(p - 1);
            }
            if c + 1 < w {
                nbrs.push(p + 1);
            }
            for q in nbrs {
                if !seen[q] && seg.labels()[q] == label {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
    }
    components == seg.k()
}

fn slic_suite() -> Outcome {
    let mut checked = 0;
    for (seed, size, k) in [(1u64, 48usize, 23usize), (2, 64, 41), (3, 40, 100)] {
        let (coh, _) = synth_scene(&SceneSpec::five_class(size, size), seed).map_err(|e| e.to_string())?;
        let rgb = pauli_rgb(&coh);
        let params = SlicParams::new(k);
        let seg = slic_segment(&rgb, &params).map_err(|e| e.to_string())?;
        ensure(seg.labels().len() == size * size, || "incomplete coverage".into())?;
        let mut used = vec![false; seg.k()];
        for &l in seg.labels() {
            ensure((l as usize) < seg.k(), || format!("label {l} >= K {}", seg.k()))?;
            used[l as usize] = true;
        }
        ensure(used.iter().all(|&u| u), || "labels not contiguous".into())?;
        ensure(four_connected(&seg), || format!("k={k}: disconnected segment"))?;
        ensure(seg.k() as f64 <= 1.5 * k as f64, || format!("K {} above 1.5x{k}", seg.k()))?;
        let again = slic_segment(&rgb, &params).map_err(|e| e.to_string())?;
        ensure(again == seg, || "not deterministic".into())?;
        checked += 1;
    }
    let colors = [[200u8, 30, 30], [30, 200, 30], [30, 30, 200], [220, 220, 40]];
    let quad = RgbImage::from_fn(16, 16, |x, y| Rgb(colors[(y / 8 * 2 + x / 8) as usize]));
    let seg = slic_segment(&quad, &SlicParams::new(4)).map_err(|e| e.to_string())?;
    ensure(seg.k() == 4, || format!("quadrants gave K={}", seg.k()))?;
    for y in 0..16 {
        for x in 0..16 {
            let same_as_corner = seg.get(y, x) == seg.get(y / 8 * 8, x / 8 * 8);
            ensure(same_as_corner, || format!("pixel ({y},{x}) left its quadrant"))?;
        }
    }
    let corners: std::collections::BTreeSet<u32> =
        [(0, 0), (0, 8), (8, 0), (8, 8)].iter().map(|&(r, c)| seg.get(r, c)).collect();
    ensure(corners.len() == 4, || "quadrants merged".into())?;
    Ok(format!("{checked} scenes partitioned cleanly, quadrants recovered exactly"))
}

// ---------------------------------------------------------------------------
// 7. Synthetic end-to-end

fn scaled_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        data: DataSource::Synthetic(SceneSpec::five_class(128, 128)),
        seed,
        ..Default::default()
    };
    cfg.split.per_class = 30;
    cfg.superpixel.k_target = Some(128 * 128 / 100);
    cfg.graphmae.epochs = 150;
    cfg.fusion.epochs = 100;
    // narrower pixel branch so the run fits a laptop CPU budget
    cfg.cnn = CnnConfig {
        patch_size: 9,
        channels: [16, 32, 32, 32],
        ..Default::default()
    };
    cfg.predict_batch = 512;
    cfg
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn end_to_end() -> Outcome {
    let alphas = [0.4, 1.0, 0.0];
    let mut oa = vec![Vec::new(); alphas.len()];
    let mut drops = Vec::new();
    let mut notes = Vec::new();
    for seed in 0..3u64 {
        let report = run_experiment(&scaled_config(seed), &alphas).map_err(|e| e.to_string())?;
        let l = &report.pretrain_losses;
        let head = l[..10].iter().sum::<f64>() / 10.0;
        let tail = l[l.len() - 10..].iter().sum::<f64>() / 10.0;
        drops.push(1.0 - tail / head);
        let mut parts = Vec::new();
        for (i, run) in report.runs.iter().enumerate() {
            oa[i].push(run.metrics.oa);
            parts.push(format!("{} {:.4}", method_name(run.alpha), run.metrics.oa));
        }
        notes.push(format!("seed {seed} (K={}): {}", report.segments, parts.join(", ")));
    }
    for n in &notes {
        println!("    {n}");
    }
    let [dbgc, gnn, cnn] = [median(oa[0].clone()), median(oa[1].clone()), median(oa[2].clone())];
    let drop = median(drops);
    let summary = format!("median OA DB-GC {dbgc:.4}, GNN {gnn:.4}, CNN {cnn:.4}; loss drop {:.1}%", drop * 100.0);
    ensure(dbgc >= 0.90, || format!("{summary}: DB-GC below 0.90"))?;
    ensure(dbgc >= gnn - 0.01 && dbgc >= cnn - 0.01, || format!("{summary}: ordering violated"))?;
    ensure(drop >= 0.30, || format!("{summary}: pretrain loss drop below 30%"))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 8. Determinism of the command-line pipeline

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = serde_json::json!({
        "data": {"synthetic": SceneSpec::five_class(32, 32)},
        "superpixel": {"k_target": 10},
        "split": {"per_class": 8},
        "graphmae": {"heads": 2, "head_dim": 4, "encoder_layers": 2, "epochs": 10},
        "cnn": {"patch_size": 7, "channels": [4, 4, 4, 4], "out_dim": 8},
        "fusion": {"epochs": 5},
        "seed": 42
    });
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, config.to_string()).map_err(|e| e.to_string())?;
    let run = |out: &Path| -> Result<(), String> {
        let status = Command::new(env!("CARGO_BIN_EXE_dbgc"))
            .args(["run-all", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(out)
            .env_remove("DBGC_OUT")
            .env("RUST_LOG", "warn")
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("run-all exited with {status}"))
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a)?;
    run(&b)?;
    for name in ["metrics.json", "prediction.png"] {
        let x = std::fs::read(a.join(name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(name)).map_err(|e| e.to_string())?;
        ensure(x == y, || format!("{name} differs between runs"))?;
    }
    Ok("metrics.json and prediction.png bitwise identical".into())
}

// ---------------------------------------------------------------------------
// 9. Real data

fn real_data(dir: &Path) -> Outcome {
    let cfg = PipelineConfig {
        data: DataSource::Directory(dir.to_path_buf()),
        ..Default::default()
    };
    let report = run_experiment(&cfg, &[cfg.fusion.alpha]).map_err(|e| e.to_string())?;
    let oa = report.runs[0].metrics.oa;
    ensure((oa - 0.9840).abs() <= 0.05, || format!("OA {oa:.4}, reported 0.9840"))?;
    Ok(format!("OA {oa:.4} (reported 0.9840)"))
}

fn main() -> ExitCode {
    let criteria: Vec<(&str, bool, Box<dyn FnOnce() -> Verdict>)> = vec![
        ("1 sce analytic suite", true, Box::new(|| timed(Some(Duration::from_secs(1)), sce_suite))),
        ("2 gradient suite", true, Box::new(|| timed(Some(Duration::from_secs(60)), gradient_suite))),
        ("3 gat oracle equivalence", true, Box::new(|| timed(None, gat_oracle_suite))),
        ("4 masking conformance", true, Box::new(|| timed(None, masking_suite))),
        ("5 metrics vs reported AA", true, Box::new(|| timed(None, metrics_suite))),
        ("6 slic partition suite", true, Box::new(|| timed(None, slic_suite))),
        ("7 synthetic end-to-end", true, Box::new(|| timed(Some(Duration::from_secs(600)), end_to_end))),
        ("8 run-all determinism", true, Box::new(|| timed(None, determinism))),
        (
            "9 real-data stretch (optional)",
            false,
            Box::new(|| match std::env::var_os("DBGC_FLEVOLAND_DIR") {
                Some(dir) => timed(None, || real_data(Path::new(&dir))),
                None => Verdict::Skip("DBGC_FLEVOLAND_DIR not set".into()),
            }),
        ),
    ];
    let mut failed = 0;
    for (name, required, run) in criteria {
        let line = match run() {
            Verdict::Pass(d) => format!("PASS  criterion {name}: {d}"),
            Verdict::Fail(d) => {
                if required {
                    failed += 1;
                }
                format!("FAIL  criterion {name}: {d}")
            }
            Verdict::Skip(d) => format!("SKIP  criterion {name}: {d}"),
        };
        println!("{line}");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all required acceptance criteria passed");
        ExitCode::SUCCESS
    }
}

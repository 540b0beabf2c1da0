use optimus_desk::comm::{Topology, World, WorldConfig};
use optimus_desk::moe::{self, ExpertWeights, MoeConfig, MoeGrads};
use optimus_desk::{IndexTensor, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn weights<T: optimus_desk::Float>(cfg: &MoeConfig, rng: &mut ChaCha8Rng) -> ExpertWeights<T> {
    let (n, h, i) = (cfg.num_experts, cfg.hidden, cfg.intermediate);
    ExpertWeights {
        gate: Tensor::randn(&[n, h, i], 1.0 / (h as f64).sqrt(), rng),
        up: Tensor::randn(&[n, h, i], 1.0 / (h as f64).sqrt(), rng),
        down: Tensor::randn(&[n, i, h], 1.0 / (i as f64).sqrt(), rng),
        router: Tensor::randn(&[h, n], 1.0, rng),
    }
}

fn norm_rel<T: optimus_desk::Float>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let scale = b.data().iter().map(|v| v.as_f64().abs()).fold(1e-30, f64::max);
    a.max_rel_err(b, scale)
}

struct FastRun<T: optimus_desk::Element> {
    output: Tensor<T>,
    grads: Option<MoeGrads<T>>,
    routed: Vec<usize>,
    local_tokens: Vec<Vec<usize>>,
}

/// Runs the fast block on `ep x tp` ranks over the full batch `input[T, H]`
/// and reassembles outputs and gradients in global order.
fn run_fast<T: optimus_desk::Float>(
    cfg: &MoeConfig,
    tp: usize,
    input: &Tensor<T>,
    full: &ExpertWeights<T>,
    fur: bool,
    out_grad: Option<&Tensor<T>>,
) -> FastRun<T> {
    let ep = cfg.ep;
    let world = World::new(WorldConfig::new(Topology::new(1, tp, ep, 1).unwrap()));
    let s = input.rows() / ep;
    let per_rank = world
        .run_all(|rank| {
            let c = rank.coords();
            let w = full.shard(c.ep, ep, c.tp, tp)?;
            let x = input.slice_rows(c.ep * s, (c.ep + 1) * s);
            let (out, saved, stats) = moe::fast_moe_forward(rank, &x, &w, cfg, fur)?;
            let grads = match out_grad {
                Some(g) => {
                    let g = g.slice_rows(c.ep * s, (c.ep + 1) * s);
                    Some(moe::fast_moe_backward(rank, &g, &saved, &w, None)?)
                }
                None => None,
            };
            Ok((c, out, grads, saved.artifacts.routed, stats.local_expert_tokens))
        })
        .unwrap();

    let tp0: Vec<_> = per_rank.iter().filter(|r| r.0.tp == 0).collect();
    let outs: Vec<&Tensor<T>> = tp0.iter().map(|r| &r.1).collect();
    let output = Tensor::concat_rows(&outs).unwrap();
    let grads = out_grad.map(|_| {
        let (n, h, i) = (cfg.num_experts, cfg.hidden, cfg.intermediate);
        let mut g = ExpertWeights::<T>::zeros(n, h, i, n);
        let nr = cfg.experts_per_rank();
        let il = i / tp;
        let mut inputs = Vec::new();
        for (c, _, gr, _, _) in &per_rank {
            let gr = gr.as_ref().unwrap();
            g.gate.write_narrow(0, c.ep * nr, &{
                let mut blk = g.gate.narrow(0, c.ep * nr, nr);
                blk.write_narrow(2, c.tp * il, &gr.experts.gate);
                blk
            });
            g.up.write_narrow(0, c.ep * nr, &{
                let mut blk = g.up.narrow(0, c.ep * nr, nr);
                blk.write_narrow(2, c.tp * il, &gr.experts.up);
                blk
            });
            g.down.write_narrow(0, c.ep * nr, &{
                let mut blk = g.down.narrow(0, c.ep * nr, nr);
                blk.write_narrow(1, c.tp * il, &gr.experts.down);
                blk
            });
            if c.tp == 0 {
                g.router.add_assign(&gr.experts.router).unwrap();
                inputs.push(gr.input.clone());
            }
        }
        let refs: Vec<&Tensor<T>> = inputs.iter().collect();
        MoeGrads {
            input: Tensor::concat_rows(&refs).unwrap(),
            experts: g,
        }
    });
    FastRun {
        output,
        grads,
        routed: tp0.iter().map(|r| r.3).collect(),
        local_tokens: tp0.iter().map(|r| r.4.clone()).collect(),
    }
}

fn random_cfg(rng: &mut ChaCha8Rng) -> (MoeConfig, usize) {
    let ep = [1, 2, 4][rng.gen_range(0..3)];
    let n = (ep * rng.gen_range(1..=16 / ep)).max(2);
    let k = rng.gen_range(1..=n);
    let h = rng.gen_range(8..=64);
    let i = rng.gen_range(8..=64);
    let s = rng.gen_range(4..=64);
    let mut cfg = MoeConfig::new(n, k, h, i, ep).unwrap();
    cfg.token_block_size = [1, 3, 8, 16][rng.gen_range(0..4)];
    (cfg, s)
}

#[test]
fn fast_matches_reference_on_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (cfg, s) = random_cfg(&mut rng);
        let w = weights::<f32>(&cfg, &mut rng);
        let x = Tensor::<f32>::randn(&[s * cfg.ep, cfg.hidden], 1.0, &mut rng);
        let fast = run_fast(&cfg, 1, &x, &w, false, None);
        let full_cfg = MoeConfig { ep: 1, ..cfg };
        let reference = moe::reference_moe_forward(&x, &w, &full_cfg).unwrap();
        let err = norm_rel(&fast.output, &reference);
        assert!(err < 1e-5, "case {case} {cfg:?} s={s}: rel err {err}");
        assert_eq!(fast.routed.iter().sum::<usize>(), s * cfg.ep * cfg.top_k, "conservation");
        worst = worst.max(err);
    }
    assert!(worst < 1e-5);
}

#[test]
fn fast_matches_reference_in_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (cfg, s) = random_cfg(&mut rng);
        let w = weights::<f64>(&cfg, &mut rng);
        let x = Tensor::<f64>::randn(&[s * cfg.ep, cfg.hidden], 1.0, &mut rng);
        let fast = run_fast(&cfg, 1, &x, &w, false, None);
        let reference = moe::reference_moe_forward(&x, &w, &MoeConfig { ep: 1, ..cfg }).unwrap();
        assert!(norm_rel(&fast.output, &reference) < 1e-10);
    }
}

#[test]
fn single_expert_equals_plain_mlp_with_no_traffic() {
    let cfg = MoeConfig::new(1, 1, 8, 16, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = weights::<f64>(&cfg, &mut rng);
    let x = Tensor::<f64>::randn(&[5, 8], 1.0, &mut rng);
    let world = World::new(WorldConfig::new(Topology::serial()));
    let out = world
        .run_all(|rank| Ok(moe::fast_moe_forward(rank, &x, &w, &cfg, false)?.0))
        .unwrap()
        .remove(0);
    let g = optimus_desk::tensor::matmul(&x, &w.gate.clone().reshape(&[8, 16]).unwrap()).unwrap();
    let u = optimus_desk::tensor::matmul(&x, &w.up.clone().reshape(&[8, 16]).unwrap()).unwrap();
    let m = optimus_desk::tensor::silu_glu(&g, &u).unwrap();
    let y = optimus_desk::tensor::matmul(&m, &w.down.clone().reshape(&[16, 8]).unwrap()).unwrap();
    assert!(norm_rel(&out, &y) < 1e-12);
    assert!(world.ledger().is_empty());
}

/// Groups `(token, k)` selections of local experts by expert with a stable
/// sort over token id.
fn stable_sort_oracle(indices: &IndexTensor, cfg: &MoeConfig, ep_rank: usize) -> (Vec<usize>, Vec<usize>) {
    let (start, end) = cfg.expert_range(ep_rank);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for t in 0..indices.rows() {
        for &e in indices.row(t) {
            if (start..end).contains(&e) {
                pairs.push((e, t));
            }
        }
    }
    pairs.sort_by_key(|&(e, _)| e);
    let counts = (start..end).map(|e| pairs.iter().filter(|p| p.0 == e).count()).collect();
    (pairs.into_iter().map(|p| p.1).collect(), counts)
}

#[test]
fn input_indices_match_stable_sort_for_every_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let ep = [1, 2, 4][rng.gen_range(0..3)];
        let n = ep * rng.gen_range(1..=4);
        let k = rng.gen_range(1..=n);
        let t = 8 * rng.gen_range(1..=6);
        let mut idx = IndexTensor::zeros(&[t, k]);
        for r in 0..t {
            let mut experts: Vec<usize> = (0..n).collect();
            for j in 0..k {
                let pick = rng.gen_range(j..n);
                experts.swap(j, pick);
                idx.set(&[r, j], experts[j]);
            }
        }
        for r in 0..ep {
            let (oracle, counts) = stable_sort_oracle(&idx, &MoeConfig::new(n, k, 1, 1, ep).unwrap(), r);
            let mut reference_out: Option<Vec<usize>> = None;
            for tbs in [t, t / 2, t / 4, 8, 1] {
                let mut cfg = MoeConfig::new(n, k, 1, 1, ep).unwrap();
                cfg.token_block_size = tbs;
                let art = moe::build_artifacts(&idx, r, &cfg).unwrap();
                assert_eq!(art.input_indices, oracle, "tbs={tbs}");
                assert_eq!(art.token_counts(), counts);
                assert_eq!(art.cum_token_counts[cfg.experts_per_rank()], art.routed);
                assert_eq!(art.expert_counts.iter().sum::<usize>(), art.routed);
                let mut perm = art.output_indices.clone();
                perm.sort_unstable();
                assert_eq!(perm, (0..art.routed).collect::<Vec<_>>());
                // gathered (token, k) in output order is independent of TH
                let seq: Vec<usize> = art
                    .output_indices
                    .iter()
                    .zip(&art.selected_expert_indices)
                    .map(|(&o, &kk)| art.input_indices[o] * k + kk)
                    .collect();
                match &reference_out {
                    None => reference_out = Some(seq),
                    Some(prev) => assert_eq!(prev, &seq),
                }
            }
        }
    }
}

#[test]
fn output_is_independent_of_token_block_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = MoeConfig::new(8, 2, 16, 16, 2).unwrap();
    let w = weights::<f32>(&base, &mut rng);
    let x = Tensor::<f32>::randn(&[2 * 24, 16], 1.0, &mut rng);
    let mut outputs = Vec::new();
    for tbs in [1, 2, 4, 8, 48] {
        let cfg = MoeConfig {
            token_block_size: tbs,
            ..base
        };
        outputs.push(run_fast(&cfg, 1, &x, &w, false, None).output);
    }
    for o in &outputs[1..] {
        assert_eq!(o.data(), outputs[0].data());
    }
}

#[test]
fn fur_gives_equal_counts_on_every_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (n, k, ep, s) in [(8, 2, 1, 4), (8, 2, 4, 8), (16, 4, 2, 16), (4, 4, 2, 3)] {
        let cfg = MoeConfig::new(n, k, 8, 8, ep).unwrap();
        let w = weights::<f32>(&cfg, &mut rng);
        for _step in 0..3 {
            let x = Tensor::<f32>::randn(&[s * ep, 8], 1.0, &mut rng);
            let run = run_fast(&cfg, 1, &x, &w, true, None);
            let all: Vec<usize> = run.local_tokens.concat();
            assert_eq!(all.len(), n);
            assert!(all.iter().all(|&c| c == all[0]), "{all:?}");
            assert_eq!(all[0], s * ep * k / n);
            let (fw, fi, _) = moe::fur_route::<f32>(&MoeConfig { ep: 1, ..cfg }, s * ep, 0);
            let reference = moe::reference_moe_forward_routed(&x, &w, &fw, &fi);
            assert!(norm_rel(&run.output, &reference) < 1e-5);
        }
    }
}

fn loss_grad_fd(
    cfg: &MoeConfig,
    x: &Tensor<f64>,
    w: &ExpertWeights<f64>,
    g: &Tensor<f64>,
    which: &str,
    idx: usize,
) -> f64 {
    let eps = 1e-6;
    let eval = |delta: f64| {
        let mut w = w.clone();
        let mut x = x.clone();
        match which {
            "gate" => w.gate.data_mut()[idx] += delta,
            "up" => w.up.data_mut()[idx] += delta,
            "down" => w.down.data_mut()[idx] += delta,
            "router" => w.router.data_mut()[idx] += delta,
            _ => x.data_mut()[idx] += delta,
        }
        let out = moe::reference_moe_forward(&x, &w, &MoeConfig { ep: 1, ..*cfg }).unwrap();
        out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    (eval(eps) - eval(-eps)) / (2.0 * eps)
}

fn grad_of<'a>(g: &'a MoeGrads<f64>, which: &str) -> &'a Tensor<f64> {
    match which {
        "gate" => &g.experts.gate,
        "up" => &g.experts.up,
        "down" => &g.experts.down,
        "router" => &g.experts.router,
        _ => &g.input,
    }
}

#[test]
fn finite_difference_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for normalize in [false, true] {
        let mut cfg = MoeConfig::new(4, 2, 6, 5, 1).unwrap();
        cfg.normalize_topk_weights = normalize;
        let w = weights::<f64>(&cfg, &mut rng);
        let x = Tensor::<f64>::randn(&[7, 6], 1.0, &mut rng);
        let g = Tensor::<f64>::randn(&[7, 6], 1.0, &mut rng);
        let fast = run_fast(&cfg, 1, &x, &w, false, Some(&g)).grads.unwrap();
        let (ref_dx, ref_dw) = moe::reference_moe_backward(&x, &w, &cfg, &g).unwrap();
        assert!(norm_rel(&fast.input, &ref_dx) < 1e-10);
        assert!(norm_rel(&fast.experts.router, &ref_dw.router) < 1e-10);
        assert!(norm_rel(&fast.experts.gate, &ref_dw.gate) < 1e-10);
        for which in ["gate", "up", "down", "router", "input"] {
            let analytic = grad_of(&fast, which);
            let scale = analytic.data().iter().map(|v| v.abs()).fold(1e-12, f64::max);
            for idx in (0..analytic.numel()).step_by(3) {
                let fd = loss_grad_fd(&cfg, &x, &w, &g, which, idx);
                let err = (fd - analytic.data()[idx]).abs() / scale;
                assert!(err < 1e-4, "{which}[{idx}] normalize={normalize}: fd {fd} vs {}", analytic.data()[idx]);
            }
        }
    }
}

#[test]
fn zero_output_grad_gives_zero_grads() {
    let cfg = MoeConfig::new(4, 2, 6, 5, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = weights::<f64>(&cfg, &mut rng);
    let x = Tensor::<f64>::randn(&[8, 6], 1.0, &mut rng);
    let g = run_fast(&cfg, 1, &x, &w, false, Some(&Tensor::zeros(&[8, 6]))).grads.unwrap();
    for t in [&g.input, &g.experts.gate, &g.experts.up, &g.experts.down, &g.experts.router] {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn expert_and_tensor_parallel_gradients_match_serial() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let base = MoeConfig::new(8, 3, 12, 8, 1).unwrap();
    let w = weights::<f64>(&base, &mut rng);
    let x = Tensor::<f64>::randn(&[16, 12], 1.0, &mut rng);
    let g = Tensor::<f64>::randn(&[16, 12], 1.0, &mut rng);
    let serial = run_fast(&base, 1, &x, &w, false, Some(&g));
    let sg = serial.grads.unwrap();
    for (ep, tp) in [(2, 1), (4, 1), (2, 2), (1, 4)] {
        let cfg = MoeConfig { ep, ..base };
        let run = run_fast(&cfg, tp, &x, &w, false, Some(&g));
        assert!(norm_rel(&run.output, &serial.output) < 1e-10, "ep={ep} tp={tp}");
        let pg = run.grads.unwrap();
        for which in ["gate", "up", "down", "router", "input"] {
            let err = norm_rel(grad_of(&pg, which), grad_of(&sg, which));
            assert!(err < 1e-10, "ep={ep} tp={tp} {which}: {err}");
        }
    }
    // f32 path within the looser tolerance
    let w32 = ExpertWeights {
        gate: w.gate.cast::<f32>(),
        up: w.up.cast(),
        down: w.down.cast(),
        router: w.router.cast(),
    };
    let (x32, g32) = (x.cast::<f32>(), g.cast::<f32>());
    let s1 = run_fast(&base, 1, &x32, &w32, false, Some(&g32)).grads.unwrap();
    let s2 = run_fast(&MoeConfig { ep: 2, ..base }, 1, &x32, &w32, false, Some(&g32)).grads.unwrap();
    assert!(norm_rel(&s2.experts.gate, &s1.experts.gate) < 1e-5);
    assert!(norm_rel(&s2.input, &s1.input) < 1e-5);
}

#[test]
fn gathered_order_and_duplicated_gradient_reduction() {
    let world = World::new(WorldConfig::new(Topology::new(1, 1, 2, 1).unwrap()));
    let results = world
        .run_all(|rank| {
            let r = rank.coords().ep as f64;
            let x = Tensor::<f64>::full(&[2, 3], r);
            let w = Tensor::<f64>::full(&[2, 1], r);
            let i = IndexTensor::full(&[2, 1], rank.coords().ep);
            let (gx, _, gi) = moe::gather_tokens(rank, &x, &w, &i)?;
            // every rank holds the same full gradient, as after allgather
            let full = Tensor::<f64>::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0])?;
            let ep = rank.group(optimus_desk::comm::Axis::Ep);
            let back = rank.reducescatter(&ep, &full)?;
            Ok((gx, gi, back))
        })
        .unwrap();
    for (r, (gx, gi, back)) in results.iter().enumerate() {
        assert_eq!(gx.data(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(gi.data(), &[0, 0, 1, 1]);
        let expected: Vec<f64> = (0..2).map(|j| 2.0 * (2 * r + j + 1) as f64).collect();
        assert_eq!(back.data(), expected.as_slice());
    }
}

#[test]
fn routing_dump_is_json() {
    let cfg = MoeConfig::new(4, 2, 4, 4, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = weights::<f32>(&cfg, &mut rng);
    let x = Tensor::<f32>::randn(&[4, 4], 1.0, &mut rng);
    let world = World::new(WorldConfig::new(Topology::serial()));
    let dump = world
        .run_all(|rank| moe::fast_moe_forward(rank, &x, &w, &cfg, false)?.1.routing_json())
        .unwrap()
        .remove(0);
    let v: serde_json::Value = serde_json::from_str(&dump).unwrap();
    assert_eq!(v["artifacts"]["routed"], 8);
    assert_eq!(v["artifacts"]["input_indices"].as_array().unwrap().len(), 8);
    assert_eq!(v["router"]["probs"].as_array().unwrap().len(), 16);
}

use optimus_desk::comm::{volume_compare_allgather_vs_all2all, Topology, World, WorldConfig};
use optimus_desk::model::{count_params, ModelConfig};
use optimus_desk::moe::{fast_moe_forward, fur_route, reference_moe_forward, ExpertWeights, MoeConfig};
use optimus_desk::optim::{memory_report, OptimizerMode, DEFAULT_CAPACITY_BYTES};
use optimus_desk::parallel::{build_schedule, ScheduleKind};
use optimus_desk::{IndexTensor, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, r: Result<(bool, String)>) -> Check {
    match r {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

const PRESET_SIZES: [(&str, f64, f64); 5] = [
    ("mula-1b", 1.3e9, 1.3e9),
    ("mula-7b-a1b", 6.9e9, 1.3e9),
    ("mula-20b-a2b", 20e9, 2.4e9),
    ("mula-100b-a7b", 100e9, 7.6e9),
    ("mula-220b-a10b", 220e9, 10e9),
];

fn param_counts() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for (name, total, active) in PRESET_SIZES {
        let p = count_params(&ModelConfig::by_name(name)?);
        worst = worst.max((p.total as f64 / total - 1.0).abs()).max((p.active as f64 / active - 1.0).abs());
    }
    Ok((worst <= 0.02, format!("worst relative deviation {worst:.4}")))
}

fn memory() -> Result<(bool, String)> {
    let r = memory_report(7e9, 0.0, OptimizerMode::Ddp, &Topology::serial(), DEFAULT_CAPACITY_BYTES);
    Ok((r.total == 112e9 && !r.feasible, format!("{} GB, feasible={}", r.total_gb, r.feasible)))
}

fn moe_oracle(cases: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let ep = [1, 2][rng.gen_range(0..2)];
        let n = ep * rng.gen_range(1..5);
        let k = rng.gen_range(1..=n.min(3));
        let (h, i, s) = (rng.gen_range(2..12), rng.gen_range(2..12), rng.gen_range(1..10));
        let mut cfg = MoeConfig::new(n, k, h, i, ep)?;
        cfg.token_block_size = rng.gen_range(1..5);
        let full = ExpertWeights {
            gate: Tensor::<f32>::randn(&[n, h, i], 0.5, &mut rng),
            up: Tensor::randn(&[n, h, i], 0.5, &mut rng),
            down: Tensor::randn(&[n, i, h], 0.5, &mut rng),
            router: Tensor::randn(&[h, n], 0.5, &mut rng),
        };
        let x: Tensor<f32> = Tensor::randn(&[s * ep, h], 1.0, &mut rng);
        let expect = reference_moe_forward(&x, &full, &MoeConfig { ep: 1, ..cfg })?;
        let world = World::new(WorldConfig::new(Topology::new(1, 1, ep, 1)?));
        let outs = world.run_all(|rank| {
            let e = rank.coords().ep;
            let w = full.shard(e, ep, 0, 1)?;
            Ok(fast_moe_forward(rank, &x.narrow(0, e * s, s), &w, &cfg, false)?.0)
        })?;
        let scale = expect.data().iter().fold(0f64, |m, v| m.max(v.abs() as f64)).max(1e-30);
        for (e, o) in outs.iter().enumerate() {
            let r = expect.narrow(0, e * s, s);
            let d = o.data().iter().zip(r.data()).fold(0f64, |m, (a, b)| m.max((a - b).abs() as f64));
            worst = worst.max(d / scale);
        }
    }
    Ok((worst <= 1e-5, format!("{cases} configs, worst normwise error {worst:.2e}")))
}

fn volume(cases: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let ep = rng.gen_range(1..5);
        let n = ep * rng.gen_range(1..4);
        let k = rng.gen_range(1..=n);
        let s = rng.gen_range(1..8);
        let idx: Vec<usize> = (0..s * ep)
            .flat_map(|_| rand::seq::index::sample(&mut rng, n, k).into_vec())
            .collect();
        let v = volume_compare_allgather_vs_all2all(s, 8, n, ep, &IndexTensor::new(&[s * ep, k], idx)?, 4)?;
        if v.allgather_bytes < v.all2all_bytes {
            return Ok((false, format!("allgather {} < all2all {}", v.allgather_bytes, v.all2all_bytes)));
        }
    }
    Ok((true, format!("{cases} routings")))
}

fn fur() -> Result<(bool, String)> {
    for (n, k, ep, s) in [(8, 2, 1, 4), (8, 2, 2, 8), (6, 3, 3, 4)] {
        let cfg = MoeConfig::new(n, k, 4, 4, ep)?;
        let mut counts = vec![0usize; n];
        for r in 0..ep {
            let (_, idx, _) = fur_route::<f32>(&cfg, s, r);
            idx.data().iter().for_each(|&e| counts[e] += 1);
        }
        if counts.iter().any(|&c| c != counts[0]) {
            return Ok((false, format!("counts {counts:?}")));
        }
    }
    Ok((true, "equal per-expert counts".into()))
}

fn schedules() -> Result<(bool, String)> {
    let mut n = 0;
    for pp in [1, 2, 4] {
        for m in [4, 8] {
            for (kind, v) in [(ScheduleKind::Gpipe, 1), (ScheduleKind::OneFOneB, 1), (ScheduleKind::Interleaved, 2)] {
                build_schedule(kind, pp, m, v)?.validate()?;
                n += 1;
            }
        }
    }
    Ok((true, format!("{n} schedules replayed")))
}

pub fn verify(seed: u64) -> Vec<Check> {
    vec![
        check("param-counts", param_counts()),
        check("memory-16p", memory()),
        check("moe-oracle", moe_oracle(50, seed)),
        check("volume", volume(100, seed)),
        check("fur", fur()),
        check("schedules", schedules()),
    ]
}

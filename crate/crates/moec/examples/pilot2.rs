// scratch: timing breakdown + lambda sweep for balance
use std::time::Instant;

use moec::model::{self, ModelConfig, ModelParams, ARCH_PRESET_STD};
use moec::numeric::mse_loss;
use moec::trainer::{adam_step, derive_rng, lr_at, AdamState, TrainConfig};
use moec::volume::{make_synthetic, sample_batch, SyntheticKind};

fn main() {
    let vol = make_synthetic(SyntheticKind::TwoMaterialSphere, [64, 64, 64], 0).unwrap();
    let mcfg = ModelConfig::build(
        vol.dims(),
        vol.voxel_bits(),
        vol.norm(),
        64.0,
        2,
        1,
        100.0,
        1.25,
        ARCH_PRESET_STD,
    )
    .unwrap();

    // --- timing breakdown over 100 steps ---
    let tcfg = TrainConfig::desk(0);
    let mut params = ModelParams::init(&mcfg, 0).unwrap();
    let mut adam = AdamState::new(params.param_count());
    let (mut t_sample, mut t_fwd, mut t_loss, mut t_bwd, mut t_adam) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for step in 0..100u64 {
        let t0 = Instant::now();
        let mut rng = derive_rng(0, step);
        let batch = sample_batch(&vol, tcfg.batch_size, &mut rng);
        let t1 = Instant::now();
        let (pred, taps) = model::forward(&batch.coords, &params, &mcfg, true).unwrap();
        let t2 = Instant::now();
        let (_, dpred) = mse_loss(&pred, &batch.targets).unwrap();
        let (_, dlb) = taps.balance().unwrap();
        let mut extra = dlb;
        extra.scale(tcfg.lambda);
        let t3 = Instant::now();
        let grads = model::backward(&params, &mcfg, &taps, &dpred, Some(&extra)).unwrap();
        let t4 = Instant::now();
        let mut flat = params.flatten();
        adam_step(&mut flat, &grads.flatten(), &mut adam, lr_at(step as usize, &tcfg), &tcfg, None)
            .unwrap();
        params.unflatten(&flat).unwrap();
        let t5 = Instant::now();
        t_sample += (t1 - t0).as_secs_f64();
        t_fwd += (t2 - t1).as_secs_f64();
        t_loss += (t3 - t2).as_secs_f64();
        t_bwd += (t4 - t3).as_secs_f64();
        t_adam += (t5 - t4).as_secs_f64();
    }
    println!("per-step ms: sample {:.1} fwd {:.1} loss {:.1} bwd {:.1} adam {:.1}",
        t_sample * 10.0, t_fwd * 10.0, t_loss * 10.0, t_bwd * 10.0, t_adam * 10.0);

    // --- lambda sweep: 1500 steps each, watch balance ---
    for lambda in [0.01, 1.0, 10.0, 100.0, 1000.0] {
        let mut mcfg2 = mcfg.clone();
        mcfg2.lambda_balance = lambda;
        let mut tcfg2 = TrainConfig::desk(0);
        tcfg2.steps = 1500;
        tcfg2.freeze_step = 1200;
        tcfg2.lambda = lambda;
        tcfg2.log_every = 100;
        let run = moec::trainer::train(&vol, &mcfg2, &tcfg2).unwrap();
        let last = run.log.records.last().unwrap();
        let tail: Vec<_> = run.log.records.iter().rev().take(5).collect();
        let avg_maxshare: f64 = tail
            .iter()
            .map(|r| *r.counts.iter().max().unwrap() as f64 / 8192.0)
            .sum::<f64>()
            / tail.len() as f64;
        println!(
            "lambda {lambda:>7}: L_d {:>9.3} L_b {:.4} drop {:.3} max-share {:.3} counts {:?}",
            last.l_d, last.l_b, last.drop_fraction, avg_maxshare, last.counts
        );
    }
}

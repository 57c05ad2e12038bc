// scratch pilot: desk-scale fidelity rehearsal
use std::time::Instant;

use moec::analysis::{default_peak, psnr, spectrum_concentration, ssim3d, SsimParams};
use moec::codec::{pack_artifact, unpack_artifact, ArtifactMode};
use moec::model::{ModelConfig, ARCH_PRESET_STD};
use moec::trainer::{train, TrainConfig};
use moec::volume::{make_synthetic, reconstruct_grid, SyntheticKind, Volume};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let ratio: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(64.0);
    let n: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2);

    let vol = make_synthetic(SyntheticKind::TwoMaterialSphere, [64, 64, 64], 0).unwrap();
    // simulate the file pipeline: snap to the u8 grid
    let vol = Volume::from_normalized(
        vol.dims(),
        vol.voxel_bits(),
        vol.quantized_to_grid().data().to_vec(),
        vol.norm(),
    )
    .unwrap();

    let mcfg = ModelConfig::build(
        vol.dims(),
        vol.voxel_bits(),
        vol.norm(),
        ratio,
        n,
        1,
        100.0,
        1.25,
        ARCH_PRESET_STD,
    )
    .unwrap();
    println!(
        "width {} params {} (budget {})",
        mcfg.feature_width,
        mcfg.param_count(),
        moec::model::budget_params(vol.dims(), vol.voxel_bits(), ratio).unwrap()
    );
    let mut tcfg = TrainConfig::desk(0);
    tcfg.steps = steps;
    tcfg.freeze_step = steps * 3 / 4;
    tcfg.log_every = 100;

    let t0 = Instant::now();
    let run = train(&vol, &mcfg, &tcfg).unwrap();
    let train_s = t0.elapsed().as_secs_f64();
    println!(
        "trained {steps} steps in {train_s:.1}s ({:.1} steps/s)",
        steps as f64 / train_s
    );
    for r in run.log.records.iter().rev().take(3).rev() {
        println!(
            "  step {} L_d {:.4} L_b {:.6} drop {:.4} counts {:?}",
            r.step, r.l_d, r.l_b, r.drop_fraction, r.counts
        );
    }
    let min_lb = run
        .log
        .records
        .iter()
        .map(|r| r.l_b)
        .fold(f64::INFINITY, f64::min);
    println!("min L_b over logged steps: {min_lb:.9}");

    // through the artifact roundtrip like decompression would
    for mode in [ArtifactMode::Raw, ArtifactMode::Quant] {
        let art = pack_artifact(&run.params, &mcfg, mode, tcfg.seed).unwrap();
        let (up, header) = unpack_artifact(&art).unwrap();
        let t1 = Instant::now();
        let recon = reconstruct_grid(&up, &header.model, 8192).unwrap().quantized_to_grid();
        let rec_s = t1.elapsed().as_secs_f64();
        let p = psnr(&vol, &recon, default_peak(&vol)).unwrap();
        let s = ssim3d(&vol, &recon, SsimParams::default(), default_peak(&vol)).unwrap();
        println!(
            "mode {mode}: {} bytes (ratio {:.1}), PSNR {p:.2} dB, SSIM {s:.4}, decomp {rec_s:.1}s",
            art.len(),
            vol.original_bytes() as f64 / art.len() as f64
        );
    }

    let d1 = spectrum_concentration(&vol, 1).unwrap();
    let dm = spectrum_concentration(&vol, 9).unwrap();
    println!("sphere D(1) = {d1:.4}, D(9) = {dm:.4}");
}

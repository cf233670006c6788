//! Guidance-weighted partial diffusion with a conditional colour prior.
//!
//! Run with `cargo run --example guided_refinement`.

use std::sync::Arc;

use restyle::diffusion::{
    cfg_combine, make_schedule, sdedit_refine, ConditionalGmmDenoiser, GaussianMixtureModel, GuidedDenoiser,
    ScheduleKind,
};
use restyle::scene::{synth_scene, SynthConfig};
use restyle::warp::{compose_condition, WarpResult};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // The guidance rule on scalars: (1 - a) u + a (ls s + ld d).
    let eps = cfg_combine(&[1.0], &[3.0], &[2.0], 2.0, 0.5, 0.5)?;
    println!("alpha=2 combination of u=1, s=3, d=2: {}", eps[0]);

    let (scene, _) = synth_scene(&SynthConfig::pan(32, 32, 1, 3), 3)?;
    let frame = &scene.frames[0];
    let img = &frame.image;
    let schedule = make_schedule(40, ScheduleKind::default())?;
    let gmm = GaussianMixtureModel::fit_colours(&img.data, 3, 4)?;
    println!("fitted {} colour components", gmm.components().len());

    let plain = Arc::new(ConditionalGmmDenoiser::new(gmm.clone(), schedule.clone()));
    let mut depth_aware = ConditionalGmmDenoiser::new(gmm, schedule);
    depth_aware.depth_shift = vec![-0.1; 3];
    let guided = GuidedDenoiser::new(plain.clone(), plain, Arc::new(depth_aware), 1.5, 0.6, 0.4)?;

    // Full-coverage condition built from the frame itself.
    let n = img.pixel_count();
    let warp = WarpResult {
        image: img.clone(),
        mask: vec![true; n],
        weight: vec![1.0; n],
        coverage: vec![1.0; n],
    };
    let condition = compose_condition(&warp, &frame.depth)?;
    let x: Vec<f64> = img.data.iter().map(|v| *v as f64).collect();
    let mut rng = restyle::seeded_rng(9);
    for strength in [0.0, 0.3, 0.7] {
        let out = sdedit_refine(&x, strength, &guided, &mut rng, Some(&condition))?;
        let mse = out.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
        println!("strength {strength:.1}: mean squared change {mse:.5}");
    }
    Ok(())
}

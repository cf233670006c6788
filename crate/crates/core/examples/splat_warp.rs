//! Depth-ordered softmax splatting between two synthetic views.
//!
//! Run with `cargo run --example splat_warp -- [out_dir]`.

use restyle::scene::{synth_scene, write_raster, ImageBuffer, Raster, SynthConfig};
use restyle::warp::{flow_from_pointmaps, importance_from_depth, softmax_splat_with_stats, FlowParams, SplatParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (scene, truth) = synth_scene(&SynthConfig::pan(64, 64, 3, 2), 2)?;
    let (src, dst) = (&scene.frames[0], &scene.frames[2]);
    let flow = flow_from_pointmaps(&src.pointmap, &dst.pose, &dst.intrinsics, FlowParams::default());

    let gt = &truth.pair(0, 2).flow;
    let max_err = (0..flow.flow.len())
        .filter(|&i| gt.valid[i])
        .map(|i| {
            (flow.flow[i][0] - gt.flow[i][0])
                .abs()
                .max((flow.flow[i][1] - gt.flow[i][1]).abs())
        })
        .fold(0.0f32, f32::max);
    println!("max flow deviation from renderer ground truth: {max_err:.2e} px");

    let importance = importance_from_depth(&src.depth);
    let (warped, stats) = softmax_splat_with_stats(&src.image, &flow, &importance, SplatParams::default())?;
    println!(
        "coverage {:.3}, mass in/out of bounds {:.2}/{:.2} of {:.2}",
        warped.covered_fraction(),
        stats.in_bounds_mass,
        stats.out_of_bounds_mass,
        stats.source_mass
    );

    let covis = &truth.pair(2, 0).covisible;
    let (mut sum, mut n) = (0.0, 0);
    for p in (0..covis.len()).filter(|&p| covis[p] && warped.mask[p]) {
        for c in 0..3 {
            sum += (warped.image.data[p * 3 + c] - dst.image.data[p * 3 + c]).abs() as f64;
        }
        n += 3;
    }
    println!("mean abs error against the target render: {:.4}", sum / n as f64);

    if let Some(dir) = std::env::args().nth(1) {
        std::fs::create_dir_all(&dir)?;
        write_raster(&Raster::Image(warped.image.clone()), format!("{dir}/warped.png"))?;
        let mask: Vec<f32> = warped.mask.iter().map(|m| f32::from(u8::from(*m))).collect();
        write_raster(
            &Raster::Image(ImageBuffer::from_data(64, 64, 1, mask)?),
            format!("{dir}/mask.png"),
        )?;
    }
    Ok(())
}

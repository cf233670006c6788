//! Depth, image and pose metrics on small hand-made inputs.
//!
//! Run with `cargo run --example eval_metrics`.

use nalgebra::{Rotation3, Vector3};
use restyle::metrics::{depth_metrics, pose_auc, pose_errors, psnr, ssim};
use restyle::scene::{CameraPose, DepthMap, ImageBuffer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let reference = DepthMap::from_values(4, 1, vec![1.0, 2.0, 4.0, 8.0]);
    let pred = DepthMap::from_values(4, 1, vec![1.1, 2.0, 3.0, 8.5]);
    println!("{:?}", depth_metrics(&pred, &reference, None)?);

    let a = ImageBuffer::from_data(16, 16, 1, (0..256).map(|i| (i % 16) as f32 / 15.0).collect())?;
    let b = ImageBuffer::from_data(16, 16, 1, a.data.iter().map(|v| (v * 0.9).min(1.0)).collect())?;
    println!("PSNR {:.2} dB, SSIM {:.4}", psnr(&a, &b, None)?, ssim(&a, &b)?);

    let reference: Vec<CameraPose> = (0..5)
        .map(|i| {
            let f = i as f64;
            let r = Rotation3::from_euler_angles(0.0, 0.1 * f, 0.0);
            CameraPose::from_center(*r.matrix(), Vector3::new(0.5 * f, 0.0, 0.1 * f * f))
        })
        .collect();
    // Same trajectory at twice the scale with one camera tilted by 3 degrees.
    let mut est: Vec<CameraPose> = reference
        .iter()
        .map(|p| CameraPose::from_center(p.rotation, 2.0 * p.center()))
        .collect();
    let tilt = Rotation3::from_axis_angle(&Vector3::x_axis(), 3f64.to_radians());
    est[3] = CameraPose::from_center(tilt.matrix() * est[3].rotation, est[3].center());
    let errors = pose_errors(&est, &reference)?;
    println!("recovered scale {:.3}", errors.scale);
    println!("rotation errors (deg) {:?}", errors.rotation_deg);
    for tau in [5.0, 10.0, 15.0] {
        println!("rotation AUC@{tau} = {:.1}", pose_auc(&errors.rotation_deg, tau)?);
    }
    Ok(())
}

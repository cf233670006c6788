//! Edit-friendly inversion of a sample and its exact reconstruction.
//!
//! Run with `cargo run --example inversion_roundtrip`.

use restyle::diffusion::{
    analytic_denoiser, edit_friendly_invert, make_schedule, read_inversion_record, reconstruct, write_inversion_record,
    GaussianComponent, GaussianMixtureModel, ScheduleKind,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = restyle::seeded_rng(5);
    let schedule = make_schedule(50, ScheduleKind::Cosine { s: 0.008 })?;
    let gmm = GaussianMixtureModel::new(vec![
        GaussianComponent {
            weight: 0.4,
            mean: vec![-1.0; 8],
            variance: 0.05,
        },
        GaussianComponent {
            weight: 0.6,
            mean: vec![1.0; 8],
            variance: 0.1,
        },
    ])?;
    let (component, x0) = gmm.sample(&mut rng);
    let denoiser = analytic_denoiser(gmm, schedule);

    let record = edit_friendly_invert(&x0, &denoiser, &mut rng, None)?;
    println!("drew from component {component}; stored {} noise maps", record.z.len());

    let path = std::env::temp_dir().join("restyle_inversion_example.rsir");
    write_inversion_record(&record, &path)?;
    let loaded = read_inversion_record(&path)?;
    let x = reconstruct(&loaded, &denoiser, None)?;
    let err = x.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max abs reconstruction error after a disk round trip: {err:.3e}");
    std::fs::remove_file(path)?;
    Ok(())
}

//! Soft-argmax on a two-peak score map at several temperatures, and the
//! Gaussian bottleneck rendered back from the resulting coordinates.
//!
//! ```text
//! cargo run --release --example softargmax_heatmaps
//! ```

use candle_core::{Device, Tensor};
use landmark_discovery::detector::{render_heatmaps, soft_argmax, ScoreMaps};

fn main() -> landmark_discovery::Result<()> {
    let size = 16;
    let mut scores = vec![0.0f64; size * size];
    scores[4 * size + 3] = 1.0;
    scores[11 * size + 12] = 0.8;
    let maps = ScoreMaps(Tensor::from_vec(scores, (1, 1, size, size), &Device::Cpu)?);

    println!("peaks: 1.0 at (4, 3), 0.8 at (11, 12)");
    for beta in [1.0, 10.0, 30.0, 100.0] {
        let u = soft_argmax(&maps, beta)?.to_grid_points()?[0][0];
        println!("beta {beta:>5}: u = ({:.3}, {:.3})", u[0], u[1]);
    }

    let lm = soft_argmax(&maps, 100.0)?;
    let h = render_heatmaps(&lm, 0.5, size)?;
    let values = h.0.flatten_all()?.to_vec1::<f64>()?;
    println!("\nheatmap around the landmark (sigma 0.5 cells):");
    for r in 2..7 {
        let row: Vec<String> = (1..6).map(|c| format!("{:.4}", values[r * size + c])).collect();
        println!("  {}", row.join(" "));
    }
    Ok(())
}

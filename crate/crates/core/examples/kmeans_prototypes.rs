//! Lloyd's k-means on unit vectors: two antipodal arcs, then SSE history.

use gag::router::{kmeans, KMeansConfig};

fn main() -> anyhow::Result<()> {
    let mut points = Vec::new();
    for i in 0..20 {
        let t = -0.3 + 0.6 * i as f32 / 19.0;
        points.push(vec![t.cos(), t.sin()]);
        points.push(vec![-t.cos(), -t.sin()]);
    }
    let r = kmeans(
        &points,
        &KMeansConfig {
            clusters: 2,
            n_init: 5,
            max_iter: 50,
            seed: 1,
        },
    )?;
    for c in &r.centroids {
        println!("centroid ({:+.4}, {:+.4})", c[0], c[1]);
    }
    println!("sse per iteration: {:?}", r.sse_history);
    Ok(())
}

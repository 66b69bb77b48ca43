//! Train a TopK sparse autoencoder on activations built from a known dictionary.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsmi::forecaster::HookSite;
use tsmi::numerics::{Float, Matrix};
use tsmi::sae::{fvu, train_sae, SaeConfig};

fn main() -> tsmi::Result<()> {
    let (d_model, atoms, k, n) = (32, 48, 3, 4096);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut dict = Matrix::randn(atoms, d_model, 1.0, &mut rng);
    for a in 0..atoms {
        let row = dict.row_mut(a);
        let norm = row.iter().map(|v| v * v).sum::<Float>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let mut x = Matrix::zeros(n, d_model);
    let mut ids: Vec<usize> = (0..atoms).collect();
    for r in 0..n {
        ids.shuffle(&mut rng);
        for &a in &ids[..k] {
            let c: Float = rng.gen_range(0.5..2.0);
            for (o, &v) in x.row_mut(r).iter_mut().zip(dict.row(a)) {
                *o += c * v;
            }
        }
    }

    let cfg = SaeConfig {
        d_sae: 64,
        k,
        steps: 1500,
        batch: 128,
        base_lr: 3e-3,
        warmup_steps: 50,
        dead_scan_every: 250,
        dead_threshold_steps: 40,
        seed: 1,
    };
    let (sae, log) = train_sae(&x, HookSite::encoder(0), &cfg)?;
    println!("loss {:.5} -> {:.5}", log.losses[0], log.losses.last().unwrap());
    println!("FVU {:.4}", fvu(&sae, &x)?);
    println!("dead counts {:?}, {} resample events", log.dead_counts, log.resamples.len());
    println!("active fraction {:.3}", sae.dead_feature_scan(&x)?.active_fraction);
    let z = sae.encode(x.row(0))?;
    println!("row 0 code: {:?}", z.indices.iter().zip(&z.values).collect::<Vec<_>>());
    Ok(())
}

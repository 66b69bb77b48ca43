//! Label activation traces by their strongest signed correlation with a concept channel.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use tsmi::actstore::ManifestEntry;
use tsmi::forecaster::SiteKind;
use tsmi::numerics::{Float, Matrix};
use tsmi::series::gen_diagnostic_suite;
use tsmi::taxonomy::{channel_matrix, classify_all, taxonomy_report, ConceptLabel};

fn main() -> tsmi::Result<()> {
    let suite = gen_diagnostic_suite(3, 2, 160);
    let mut entries = Vec::new();
    let mut channels = std::collections::BTreeMap::new();
    for d in &suite {
        entries.push(ManifestEntry {
            window_id: entries.len() as u64,
            series: d.series.name.clone(),
            series_start: 16,
            row_offset: 64 * entries.len() as u64,
            count: 64,
        });
        channels.insert(d.series.name.clone(), d.series.channels.clone().unwrap());
    }
    let m = channel_matrix(&channels, &entries, SiteKind::EncoderBlockOut, 64)?;

    // Fake "features": each concept's channel plus noise at half its spread,
    // and one pure-noise trace.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let spread = |row: &[Float]| {
        let n = row.len() as Float;
        let mean = row.iter().sum::<Float>() / n;
        (row.iter().map(|v| (v - mean).powi(2)).sum::<Float>() / n).sqrt()
    };
    let mut traces = Matrix::zeros(ConceptLabel::CONCEPTS.len() + 1, m.cols());
    for (j, concept) in ConceptLabel::CONCEPTS.iter().enumerate() {
        let (c, sign) = concept.channel().unwrap();
        let sd = spread(m.row(c.index()));
        for (t, v) in traces.row_mut(j).iter_mut().enumerate() {
            *v = sign as Float * m.get(c.index(), t) + sd * noise.sample(&mut rng);
        }
    }
    let last = ConceptLabel::CONCEPTS.len();
    traces.row_mut(last).iter_mut().for_each(|v| *v = noise.sample(&mut rng));

    let profiles = classify_all(&traces, &m, 0.5)?;
    for p in &profiles {
        println!("feature {:2}: {:<17} r = {:+.3}", p.feature, p.label.to_string(), p.best_score);
    }
    let report = taxonomy_report("enc.0".parse()?, &profiles);
    println!("labeled {} of {} ({:.0}%)", report.labeled, report.n_features, 100.0 * report.labeled_fraction);
    Ok(())
}

//! Generate the synthetic diagnostic suite and look at its ground-truth channels.

use tsmi::numerics::Float;
use tsmi::series::gen_diagnostic_suite;

fn main() {
    let suite = gen_diagnostic_suite(7, 2, 256);
    println!("{:<22} {:>8} {:>8} {:>9} {:>9}", "series", "mean", "std", "slope", "freq");
    for d in &suite {
        let v = &d.series.values;
        let n = v.len() as Float;
        let mean = v.iter().sum::<Float>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<Float>() / n).sqrt();
        let ch = d.series.channels.as_ref().expect("suite series carry channels");
        println!(
            "{:<22} {mean:8.3} {std:8.3} {:9.4} {:9.4}",
            d.series.name,
            ch.trend_slope[n as usize / 2],
            ch.instantaneous_frequency[n as usize / 2],
        );
    }
}

//! Scratch probe for the autocorrelation fit.

use growrnn::analysis::timescales::{autocorrelation, fit_timescales};
use growrnn::rng::{standard_normal, stream};

fn main() {
    for tau in [2.0f64, 5.0, 20.0, 50.0] {
        let phi = (-1.0 / tau).exp();
        let t = 100_000;
        let mut rng = stream(4, "ar1-fit", &[]);
        let mut x = 0.0;
        let series: Vec<f64> = (0..t)
            .map(|_| {
                x = phi * x + standard_normal(&mut rng);
                x
            })
            .collect();
        let ac = autocorrelation(&series, 200).unwrap();
        let fit = fit_timescales(&ac).unwrap();
        println!(
            "tau {tau}: model {:?} taus {:?} amps {:?} offset {:.4} reported {:.2} aics ({:.1}, {:.1}) r2 {:.4} flag {}",
            fit.model,
            fit.timescales,
            fit.amplitudes,
            fit.offset,
            fit.reported_timescale,
            fit.aic_single,
            fit.aic_double,
            fit.r_squared,
            fit.flagged
        );
    }
}

use std::str::FromStr;

use crate::bnn::VariationalNet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// Plain mean over clients.
    #[default]
    Uniform,
    /// Mean weighted by each client's training-set size.
    ByTrainSize,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::Uniform => "uniform",
            Weighting::ByTrainSize => "by_train_size",
        }
    }
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "by_train_size" => Ok(Weighting::ByTrainSize),
            other => Err(Error::Argument(format!("unknown weighting {other:?}"))),
        }
    }
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Arithmetic mean of `values`, rounded once.
///
/// The sum is carried as an unevaluated pair `hi + lo` and the division by
/// `n` is corrected with the fused remainder `hi - q·n`, so the result does
/// not depend on summation order in practice and the mean of `n` copies of
/// `x` is exactly `x`.
pub fn exact_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut values = values.into_iter();
    let Some(mut hi) = values.next() else {
        return f64::NAN;
    };
    let mut lo = 0.0;
    let mut n = 1usize;
    for v in values {
        let (s, e) = two_sum(hi, v);
        hi = s;
        lo += e;
        n += 1;
    }
    if n == 1 {
        return hi;
    }
    let (hi, lo) = two_sum(hi, lo);
    let n = n as f64;
    let q = hi / n;
    let r = (-q).mul_add(n, hi) + lo;
    if r == 0.0 {
        q
    } else {
        q + r / n
    }
}

/// Parameter-wise average of client nets (every μ and ρ tensor), folded in
/// ascending client order.
pub fn aggregate(locals: &[VariationalNet], weighting: Weighting, sizes: &[usize]) -> Result<VariationalNet> {
    let first = locals
        .first()
        .ok_or_else(|| Error::Argument("aggregate needs at least one net".into()))?;
    for (client, net) in locals.iter().enumerate().skip(1) {
        if !net.same_shape(first) {
            return Err(Error::Aggregation {
                client,
                msg: format!(
                    "shape {:?} differs from client 0 shape {:?}",
                    net.sizes(),
                    first.sizes()
                ),
            });
        }
        if net.mode() != first.mode() {
            return Err(Error::Aggregation {
                client,
                msg: format!("mode {} differs from client 0", net.mode().as_str()),
            });
        }
    }
    let flats: Vec<Vec<f64>> = locals.iter().map(VariationalNet::to_flat).collect();
    let len = flats[0].len();
    let mean: Vec<f64> = match weighting {
        Weighting::Uniform => (0..len).map(|j| exact_mean(flats.iter().map(|f| f[j]))).collect(),
        Weighting::ByTrainSize => {
            if sizes.len() != locals.len() {
                return Err(Error::dim(
                    format!("{} nets", locals.len()),
                    format!("{} sizes", sizes.len()),
                ));
            }
            let total: usize = sizes.iter().sum();
            if total == 0 {
                return Err(Error::Aggregation {
                    client: 0,
                    msg: "all training sizes are zero".into(),
                });
            }
            let total = total as f64;
            (0..len)
                .map(|j| flats.iter().zip(sizes).map(|(f, &s)| f[j] * s as f64).sum::<f64>() / total)
                .collect()
        }
    };
    let mut out = first.clone();
    out.set_flat(&mean)?;
    Ok(out)
}

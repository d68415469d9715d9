use crate::error::{Error, Result};
use crate::points::PointSet;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSeries {
    pub vectors: PointSet,
    pub delays: usize,
    /// Index in the raw series of the sample that `vectors[0]` ends at (`delays - 1`).
    pub source_offset: usize,
}

impl EmbeddedSeries {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Delay-coordinate map: row `n` is `(F(x_{n+Q-1}), F(x_{n+Q-2}), ..., F(x_n))`.
pub fn delay_embed(series: &PointSet, delays: usize) -> Result<EmbeddedSeries> {
    if delays == 0 {
        return Err(Error::InvalidArgument("delay count must be at least 1".into()));
    }
    if series.len() < delays {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            delays,
        });
    }
    let m = series.dim();
    let n_out = series.len() - delays + 1;
    let mut data = Vec::with_capacity(n_out * m * delays);
    for n in 0..n_out {
        for lag in (0..delays).rev() {
            data.extend_from_slice(series.row(n + lag));
        }
    }
    Ok(EmbeddedSeries {
        vectors: PointSet::from_flat(m * delays, data)?,
        delays,
        source_offset: delays - 1,
    })
}

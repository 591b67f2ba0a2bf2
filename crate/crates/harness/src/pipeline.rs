//! Data preparation shared by every method: ingest, normalize with training
//! statistics, difference, drive the reservoir and build supervised splits.

use crate::config::{DataSource, ExperimentConfig, PcaSpec};
use crate::error::{AtStage, HarnessError, Stage};
use resq::data::{
    apply_normalizer, fit_normalizer, load_csv, make_supervised, reconstruct_forecast, seasonal_difference, split,
    synth_seasonal, NormStats, SeasonalSpec, SupervisedSet, TimeSeries,
};
use resq::forecast::PredictiveDistribution;
use resq::reservoir::{pca_fit, pca_fit_fraction, PcaModel, Reservoir};

pub fn load_series(source: &DataSource, exclude: &[(usize, usize)]) -> Result<TimeSeries, HarnessError> {
    let series = match source {
        DataSource::Synthetic(spec) => synth_seasonal(spec).at(Stage::Ingest)?,
        DataSource::Csv { path, column, options } => load_csv(path, column, *options).at(Stage::Ingest)?,
    };
    if exclude.is_empty() {
        Ok(series)
    } else {
        series.without_ranges(exclude).at(Stage::Ingest)
    }
}

/// One split's readout pairs, with the original-scale truths they forecast.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub set: SupervisedSet,
    /// Original-series index of the first target; targets are contiguous.
    pub first_target: usize,
    pub truths: Vec<f64>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }
}

/// Everything a method needs, fixed before any training starts.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub raw: TimeSeries,
    /// Whole series normalized with the training statistics.
    pub normalized: TimeSeries,
    pub stats: NormStats,
    pub seasonal: SeasonalSpec,
    pub train: SplitData,
    pub cal: SplitData,
    pub test: SplitData,
    pub pca: Option<PcaModel>,
    pub reservoir_units: usize,
}

impl Prepared {
    pub fn n_features(&self) -> usize {
        self.train.set.n_features()
    }

    /// Maps a forecast of the normalized, differenced target back to the
    /// original scale for the pairs of `part`.
    pub fn to_original(&self, forecast: &PredictiveDistribution, part: &SplitData) -> Result<PredictiveDistribution, HarnessError> {
        let z = reconstruct_forecast(forecast, &self.normalized, self.seasonal, part.first_target).at(Stage::Evaluate)?;
        Ok(z.map_affine(self.stats.std, &vec![self.stats.mean; z.n_steps()]))
    }
}

/// Runs ingest through (optional) PCA. Pairs are assigned to a split by the
/// original index of their target, so no split sees another's targets.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, HarnessError> {
    let raw = load_series(&cfg.data, &cfg.exclude)?;
    let parts = split(&raw, &cfg.split).at(Stage::Ingest)?;
    let (n_train, n_cal) = (parts.train.len(), parts.cal.len());
    let stats = fit_normalizer(&parts.train).at(Stage::Normalize)?;
    let normalized = apply_normalizer(&raw, &stats);
    let seasonal = cfg.seasonal;
    let s = seasonal.lag();
    let diff = seasonal_difference(&normalized, seasonal).at(Stage::Difference)?;

    let reservoir = Reservoir::new(cfg.reservoir).at(Stage::Reservoir)?;
    let states = reservoir.run(&diff, cfg.washout).at(Stage::Reservoir)?;
    let all = make_supervised(&states, &diff, seasonal.horizon()).at(Stage::Supervised)?;

    let mut idx = [Vec::new(), Vec::new(), Vec::new()];
    for (k, &t) in all.target_index.iter().enumerate() {
        let orig = t + s;
        let part = if orig < n_train {
            0
        } else if orig < n_train + n_cal {
            1
        } else {
            2
        };
        idx[part].push(k);
    }
    let names = ["train", "calibration", "test"];
    for (ix, name) in idx.iter().zip(names) {
        if ix.is_empty() {
            return Err(HarnessError::Config(format!(
                "the {name} split has no supervised pairs; shorten the washout or lengthen the series"
            )));
        }
    }
    let make = |ix: &[usize]| {
        let set = all.select(ix);
        let first_target = set.target_index[0] + s;
        let truths = set.target_index.iter().map(|&t| raw.values()[t + s]).collect();
        SplitData { set, first_target, truths }
    };
    let (mut train, mut cal, mut test) = (make(&idx[0]), make(&idx[1]), make(&idx[2]));

    let pca = match cfg.pca_spec() {
        None => None,
        Some(spec) => {
            let model = match spec {
                PcaSpec::Components(d) => pca_fit(&train.set.inputs, d),
                PcaSpec::Fraction(f) => pca_fit_fraction(&train.set.inputs, f),
            }
            .at(Stage::Pca)?;
            for part in [&mut train, &mut cal, &mut test] {
                let reduced = model.transform(&part.set.inputs).at(Stage::Pca)?;
                part.set = part.set.with_inputs(reduced);
            }
            Some(model)
        }
    };
    Ok(Prepared { raw, normalized, stats, seasonal, train, cal, test, pca, reservoir_units: reservoir.n_units() })
}

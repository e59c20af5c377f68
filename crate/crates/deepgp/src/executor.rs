//! Data-parallel evaluation of the bound and its gradients: map fixed-size
//! partial sums over row shards, reduce, assemble centrally, then scatter
//! fixed-size adjoints back for the gradient pass. Per-datapoint quantities
//! never leave their shard.
//!
//! Sharding is decoupled from the worker count: the partition depends only
//! on N and `shard_count`, and the deterministic reduction folds partials
//! in ascending shard order, so results are bitwise independent of how many
//! workers processed the queue.

use crate::bound::LayerAdjoints;
use crate::error::{Error, Result};
use crate::model::{BoundBreakdown, DgpModel, Mode, ModelStats};
use crate::scalar::Real;
use ndarray::{s, Array1, Array2, ArrayView2};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Contiguous row range of the data owned by one map task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shard {
    pub shard_id: usize,
    pub begin: usize,
    pub end: usize,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.end - self.begin
    }

    pub fn is_empty(&self) -> bool {
        self.begin == self.end
    }
}

/// Split [0, N) into `shard_count` contiguous ranges of ⌈N/S⌉ rows.
/// Trailing shards may be empty when S > N.
pub fn make_shards(n: usize, shard_count: usize) -> Vec<Shard> {
    let count = shard_count.max(1);
    let per = n.div_ceil(count);
    (0..count)
        .map(|i| Shard {
            shard_id: i,
            begin: (i * per).min(n),
            end: ((i + 1) * per).min(n),
        })
        .collect()
}

/// Shard-local sums of every data-dependent statistic, for every layer.
/// All fields have fixed size (M, D, Q dimensions only).
#[derive(Debug, Clone)]
pub struct PartialReduction<F> {
    pub shard_id: usize,
    pub stats: ModelStats<F>,
}

/// Map step: exact shard-local sums. A zero-row shard returns all-zero
/// partials with count 0.
pub fn map_shard<F: Real>(
    model: &DgpModel<F>,
    y: &ArrayView2<F>,
    shard: &Shard,
) -> Result<PartialReduction<F>> {
    if shard.is_empty() {
        let stats = ModelStats {
            layers: model
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    crate::bound::LayerStats::zeros(
                        l.n_inducing(),
                        if i == 0 {
                            y.ncols()
                        } else {
                            model.layers[i - 1].input_dim()
                                - skip_extra(model, i - 1)
                        },
                    )
                })
                .collect(),
            top_mean_sq: F::zero(),
            count: 0,
        };
        return Ok(PartialReduction {
            shard_id: shard.shard_id,
            stats,
        });
    }
    let stats = model
        .stats_for_rows(y, shard.begin, shard.end)
        .map_err(|e| e.in_shard(shard.shard_id))?;
    Ok(PartialReduction {
        shard_id: shard.shard_id,
        stats,
    })
}

fn skip_extra<F: Real>(model: &DgpModel<F>, layer: usize) -> usize {
    match &model.mode {
        Mode::Supervised {
            inputs,
            skip_connection,
        } if layer == 0 && *skip_connection && model.layers.len() >= 2 => inputs.ncols(),
        _ => 0,
    }
}

/// Reduce step: elementwise sums. In deterministic mode the fold runs in
/// ascending shard id regardless of arrival order. Validates that the
/// shards partition [0, n) disjointly and completely.
pub fn reduce<F: Real>(
    mut partials: Vec<(Shard, PartialReduction<F>)>,
    n: usize,
    deterministic: bool,
) -> Result<ModelStats<F>> {
    if partials.is_empty() {
        return Err(Error::Partition("no shards".into()));
    }
    if deterministic {
        partials.sort_by_key(|(s, _)| s.shard_id);
    }
    // partition check
    let mut ranges: Vec<(usize, usize, usize)> = partials
        .iter()
        .map(|(s, _)| (s.begin, s.end, s.shard_id))
        .collect();
    ranges.sort();
    let mut cursor = 0;
    let mut seen = std::collections::HashSet::new();
    for (b, e, id) in &ranges {
        if !seen.insert(*id) {
            return Err(Error::Partition(format!("duplicate shard {id}")));
        }
        if *b != cursor {
            return Err(Error::Partition(format!(
                "gap or overlap at row {cursor} (next shard starts at {b})"
            )));
        }
        cursor = *e;
    }
    if cursor != n {
        return Err(Error::Partition(format!(
            "shards cover {cursor} of {n} rows"
        )));
    }
    let mut it = partials.into_iter();
    let mut acc = it.next().unwrap().1.stats;
    for (_, p) in it {
        acc.add(&p.stats);
    }
    Ok(acc)
}

/// Scatter step for one shard: local gradient contributions as a packed
/// vector (central-only slots zero).
pub fn scatter_shard<F: Real>(
    model: &DgpModel<F>,
    y: &ArrayView2<F>,
    shard: &Shard,
    adjoints: &[LayerAdjoints<F>],
) -> Result<Array1<F>> {
    if shard.is_empty() {
        return Ok(Array1::zeros(model.n_params()));
    }
    let out = model
        .scatter_rows(y, shard.begin, shard.end, adjoints)
        .map_err(|e| e.in_shard(shard.shard_id))?;
    let y_rows = y.slice(s![shard.begin..shard.end, ..]);
    model
        .pack_shard_gradient(&y_rows, shard.begin, out)
        .map_err(|e| e.in_shard(shard.shard_id))
}

/// Evaluation backend abstraction the trainer drives.
pub trait BoundEvaluator<F: Real> {
    fn n_rows(&self) -> usize;
    fn data_dim(&self) -> usize;
    /// Bound value and, when requested, the packed gradient.
    fn evaluate(
        &mut self,
        model: &DgpModel<F>,
        want_grad: bool,
    ) -> Result<(BoundBreakdown<F>, Option<Array1<F>>)>;
}

/// Single-threaded reference evaluator.
pub struct SerialEvaluator<F> {
    pub y: Array2<F>,
}

impl<F: Real> BoundEvaluator<F> for SerialEvaluator<F> {
    fn n_rows(&self) -> usize {
        self.y.nrows()
    }

    fn data_dim(&self) -> usize {
        self.y.ncols()
    }

    fn evaluate(
        &mut self,
        model: &DgpModel<F>,
        want_grad: bool,
    ) -> Result<(BoundBreakdown<F>, Option<Array1<F>>)> {
        if want_grad {
            let (b, g) = model.evaluate_gradients(&self.y.view())?;
            Ok((b, Some(g)))
        } else {
            Ok((model.evaluate_bound(&self.y.view())?, None))
        }
    }
}

/// In-process worker pool over a fixed shard partition. Work is pulled from
/// a queue, so any number of threads produces the same partials; with
/// deterministic reduction the results are bitwise identical across worker
/// counts and runs.
pub struct PoolEvaluator<F> {
    pub y: Array2<F>,
    shards: Vec<Shard>,
    workers: usize,
    deterministic: bool,
}

impl<F: Real> PoolEvaluator<F> {
    pub fn new(y: Array2<F>, shard_count: usize, workers: usize, deterministic: bool) -> Self {
        let shards = make_shards(y.nrows(), shard_count);
        PoolEvaluator {
            y,
            shards,
            workers: workers.max(1),
            deterministic,
        }
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    fn run_tasks<T: Send>(
        &self,
        task: impl Fn(&Shard) -> Result<T> + Sync,
    ) -> Result<Vec<(Shard, T)>> {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<(Shard, T)>>> =
            Mutex::new((0..self.shards.len()).map(|_| None).collect());
        let err: Mutex<Option<Error>> = Mutex::new(None);
        std::thread::scope(|scope| {
            for _ in 0..self.workers.min(self.shards.len()).max(1) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= self.shards.len() {
                        break;
                    }
                    match task(&self.shards[i]) {
                        Ok(t) => {
                            results.lock().unwrap()[i] = Some((self.shards[i], t));
                        }
                        Err(e) => {
                            *err.lock().unwrap() = Some(e);
                            break;
                        }
                    }
                });
            }
        });
        if let Some(e) = err.into_inner().unwrap() {
            return Err(e);
        }
        Ok(results
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|o| o.expect("worker finished without error"))
            .collect())
    }
}

impl<F: Real> BoundEvaluator<F> for PoolEvaluator<F> {
    fn n_rows(&self) -> usize {
        self.y.nrows()
    }

    fn data_dim(&self) -> usize {
        self.y.ncols()
    }

    fn evaluate(
        &mut self,
        model: &DgpModel<F>,
        want_grad: bool,
    ) -> Result<(BoundBreakdown<F>, Option<Array1<F>>)> {
        let n = self.y.nrows();
        let yv = self.y.view();
        let partials = self.run_tasks(|shard| map_shard(model, &yv, shard))?;
        let pairs = partials
            .into_iter()
            .map(|(s, p)| (s, p))
            .collect::<Vec<_>>();
        let stats = reduce(pairs, n, self.deterministic)?;
        let (breakdown, results) = model.assemble(&stats, self.y.ncols())?;
        if !want_grad {
            return Ok((breakdown, None));
        }
        let adjoints = model.adjoints(&stats, &results, self.y.ncols());
        let grads = self.run_tasks(|shard| scatter_shard(model, &yv, shard, &adjoints))?;
        let mut ordered: Vec<(usize, Array1<F>)> = grads
            .into_iter()
            .map(|(s, g)| (s.shard_id, g))
            .collect();
        if self.deterministic {
            ordered.sort_by_key(|(id, _)| *id);
        }
        let mut total = model.central_gradient_vector(n, &adjoints)?;
        for (_, g) in ordered {
            total = &total + &g;
        }
        Ok((breakdown, Some(total)))
    }
}

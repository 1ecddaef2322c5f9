use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::judge::clinical_equivalence;
use super::metrics::{category_of, recall_at_k, AliasTable, MetricsAccumulator, MetricsReport};
use super::{EvalError, StepTrace};
use crate::agents::Engine;
use crate::backend::Backend;
use crate::bundler::{bundle_text, EventBundle, SerializedStream};
use crate::memory::{GlobalProtocol, InferenceState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Access {
    /// Bundle `t` was handed to the loop.
    Read(usize),
    /// The prediction made after bundle `t` was fixed.
    Finalized(usize),
}

/// Hands out a trajectory's bundles one at a time and logs every access.
pub struct InstrumentedReader<'b> {
    bundles: &'b [EventBundle],
    log: Vec<Access>,
}

impl<'b> InstrumentedReader<'b> {
    pub fn new(bundles: &'b [EventBundle]) -> Self {
        InstrumentedReader { bundles, log: Vec::new() }
    }

    pub fn read(&mut self, t: usize) -> Option<&'b EventBundle> {
        let b = self.bundles.get(t)?;
        self.log.push(Access::Read(t));
        Some(b)
    }

    pub fn finalize(&mut self, t: usize) {
        self.log.push(Access::Finalized(t));
    }

    pub fn log(&self) -> &[Access] {
        &self.log
    }

    pub fn into_log(self) -> Vec<Access> {
        self.log
    }
}

/// Check that bundle `t + 1` is first read strictly after prediction `t` is
/// finalized, and that nothing is finalized before it is read.
pub fn certify(stay: &str, log: &[Access]) -> Result<usize, EvalError> {
    let mut read = HashSet::new();
    let mut finalized = HashSet::new();
    for access in log {
        match *access {
            Access::Read(t) => {
                if t > 0 && !finalized.contains(&(t - 1)) {
                    return Err(EvalError::Leakage {
                        stay: stay.to_string(),
                        t,
                        prev: t - 1,
                    });
                }
                read.insert(t);
            }
            Access::Finalized(t) => {
                if !read.contains(&t) || read.contains(&(t + 1)) {
                    return Err(EvalError::Leakage {
                        stay: stay.to_string(),
                        t: t + 1,
                        prev: t,
                    });
                }
                finalized.insert(t);
            }
        }
    }
    Ok(finalized.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRun {
    pub traces: Vec<StepTrace>,
    pub log: Vec<Access>,
}

/// Predict-then-observe over one stream. Each trace gets its truth from the
/// following bundle, read only after the prediction is finalized.
pub fn run_trajectory(
    engine: &Engine<'_>,
    stream: &SerializedStream,
    protocol: Arc<GlobalProtocol>,
    aliases: &AliasTable,
    judge: Option<&dyn Backend>,
) -> TrajectoryRun {
    let mut state = InferenceState::new(protocol);
    let mut reader = InstrumentedReader::new(&stream.bundles);
    let mut traces = Vec::with_capacity(stream.bundles.len());
    let mut current = reader.read(0);
    let mut t = 0;
    while let Some(bundle) = current {
        let mut trace = engine.step(&mut state, &stream.stay_id, t, bundle);
        reader.finalize(t);
        let next = reader.read(t + 1);
        if let Some(next) = next {
            trace.truth_actions = next.action_labels();
            trace.bundle_type_truth = category_of(next);
            if trace.bundle_type_truth.is_some() && !trace.truth_actions.is_empty() {
                trace.scored = true;
                trace.recall_at_5 = recall_at_k(&trace.final_actions, &trace.truth_actions, 5, aliases).ok();
                if let Some(judge) = judge {
                    trace.equivalence =
                        clinical_equivalence(judge, engine.templates(), &trace.final_actions, &trace.truth_actions, &bundle_text(bundle));
                }
            }
        }
        traces.push(trace);
        current = next;
        t += 1;
    }
    engine.finish(&mut state, traces.last_mut());
    TrajectoryRun {
        traces,
        log: reader.into_log(),
    }
}

pub struct EvalOptions<'j> {
    pub workers: usize,
    pub aliases: AliasTable,
    pub judge: Option<&'j dyn Backend>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        EvalOptions {
            workers: 1,
            aliases: AliasTable::default(),
            judge: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub report: MetricsReport,
    /// Traces in corpus order.
    pub traces: Vec<StepTrace>,
    /// Steps whose ordering was certified by the instrumented reader.
    pub certified_steps: usize,
    pub protocol_hash: String,
}

type StreamResult = Result<(TrajectoryRun, usize), String>;

fn run_one(engine: &Engine<'_>, stream: &SerializedStream, protocol: &Arc<GlobalProtocol>, opts: &EvalOptions<'_>) -> StreamResult {
    if stream.is_empty() {
        return Err("empty trajectory".into());
    }
    let run = catch_unwind(AssertUnwindSafe(|| run_trajectory(engine, stream, protocol.clone(), &opts.aliases, opts.judge)))
        .map_err(|_| "trajectory panicked".to_string())?;
    let certified = certify(stream.stay_id.as_str(), &run.log).map_err(|e| e.to_string())?;
    Ok((run, certified))
}

/// Prequential evaluation over a frozen protocol. Trajectories may run on
/// several workers; results are merged in corpus order.
pub fn prequential_run(
    corpus: &[SerializedStream],
    engine: &Engine<'_>,
    protocol: Arc<GlobalProtocol>,
    opts: &EvalOptions<'_>,
) -> Result<EvalOutput, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if !protocol.is_frozen() {
        return Err(EvalError::ProtocolNotFrozen);
    }
    let before = protocol.version_hash().to_string();
    let workers = opts.workers.clamp(1, corpus.len());

    let mut results: Vec<Option<StreamResult>> = (0..corpus.len()).map(|_| None).collect();
    if workers == 1 {
        for (i, stream) in corpus.iter().enumerate() {
            results[i] = Some(run_one(engine, stream, &protocol, opts));
        }
    } else {
        let shards: Vec<Vec<(usize, StreamResult)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let protocol = &protocol;
                    scope.spawn(move || {
                        (w..corpus.len())
                            .step_by(workers)
                            .map(|i| (i, run_one(engine, &corpus[i], protocol, opts)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker thread")).collect()
        });
        for (i, r) in shards.into_iter().flatten() {
            results[i] = Some(r);
        }
    }

    let mut acc = MetricsAccumulator::default();
    let mut traces = Vec::new();
    let mut certified_steps = 0;
    for (stream, result) in corpus.iter().zip(results) {
        match result.expect("every stream is assigned") {
            Ok((run, certified)) => {
                certified_steps += certified;
                for t in &run.traces {
                    acc.add(t, &opts.aliases, 5);
                }
                traces.extend(run.traces);
            }
            Err(reason) => {
                tracing::warn!(stay = %stream.stay_id, %reason, "trajectory excluded");
                acc.add_failed_trajectory();
            }
        }
    }
    let after = protocol.version_hash().to_string();
    if before != after {
        return Err(EvalError::ProtocolMutated { before, after });
    }
    Ok(EvalOutput {
        report: acc.report(),
        traces,
        certified_steps,
        protocol_hash: after,
    })
}

//! Seed x method grid, executed on a small pool of worker threads.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ftp_core::NamedParams;

use crate::config::{ExperimentConfig, Method};
use crate::dataset::{generate_shift_dataset, ShiftDataset};
use crate::error::{Error, Result};
use crate::metrics::{write_text, RunRecord, Summary};
use crate::runner::{obtain_pretrained, FineTuner};

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub method: Method,
    pub seed: u64,
    pub record: RunRecord,
    pub summary: Summary,
}

/// Runs `f` over `items` on up to `threads` workers, preserving order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every item processed"))
        .collect()
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs every (method, seed) pair. Each seed gets its own dataset and
/// pretrained model, shared by all methods. With `write` set, every run
/// writes its outputs to `output_dir/<method>/seed<seed>`.
pub fn sweep(
    cfg: &ExperimentConfig,
    methods: &[Method],
    seeds: &[u64],
    threads: usize,
    write: bool,
) -> Result<Vec<SweepResult>> {
    let prepared: Vec<Result<(ShiftDataset, NamedParams)>> =
        parallel_map(seeds, threads, |&seed| {
            let mut c = cfg.clone();
            c.seed = seed;
            c.output_dir = cfg
                .output_dir
                .join("pretrained")
                .join(format!("seed{seed}"));
            let data = generate_shift_dataset(&c.dataset, seed)?;
            let params = if write {
                obtain_pretrained(&c, &data)?
            } else {
                match &c.pretrained {
                    Some(p) => crate::runner::Pretrained::load(p, &c.model_spec()?)?,
                    None => crate::runner::pretrain(&c, &data)?.params,
                }
            };
            Ok((data, params))
        });
    let prepared: Vec<(ShiftDataset, NamedParams)> = prepared.into_iter().collect::<Result<_>>()?;

    let jobs: Vec<(Method, usize)> = methods
        .iter()
        .flat_map(|&m| (0..seeds.len()).map(move |i| (m, i)))
        .collect();
    let results = parallel_map(&jobs, threads, |&(method, i)| -> Result<SweepResult> {
        let mut c = cfg.clone();
        c.method = method;
        c.seed = seeds[i];
        c.output_dir = cfg
            .output_dir
            .join(method.to_string())
            .join(format!("seed{}", seeds[i]));
        let (data, params) = &prepared[i];
        let mut run = FineTuner::new(&c, data, params)?;
        let outcome = run.run();
        if write {
            run.record.write(&c.output_dir)?;
        }
        outcome?;
        let summary = run.summary()?;
        if write {
            write_text(&c.output_dir.join("config.txt"), &c.to_text())?;
            summary.write(&c.output_dir.join("summary.json"))?;
            run.to_checkpoint().save(&c.output_dir.join("final.ckpt"))?;
        }
        Ok(SweepResult {
            method,
            seed: seeds[i],
            record: run.record,
            summary,
        })
    });
    let results: Vec<SweepResult> = results.into_iter().collect::<Result<_>>()?;
    if write {
        write_table(&cfg.output_dir.join("sweep.csv"), &results)?;
    }
    Ok(results)
}

pub fn write_table(path: &Path, results: &[SweepResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "seed",
        "id_acc",
        "ood_avg",
        "final_loss",
        "bwd_count",
        "secs_per_iter",
    ])?;
    for r in results {
        let s = &r.summary;
        w.write_record([
            r.method.to_string(),
            r.seed.to_string(),
            s.accuracy.id.to_string(),
            s.accuracy.ood_average.to_string(),
            s.final_loss.to_string(),
            s.bwd_count.to_string(),
            s.mean_secs_per_iter.to_string(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Persistence(e.to_string()))?;
    write_text(path, &String::from_utf8(bytes).expect("ASCII table"))
}

/// Mean ID and OOD-average accuracy of one method across seeds.
pub fn method_means(results: &[SweepResult], method: Method) -> Option<(f64, f64)> {
    let rows: Vec<&Summary> = results
        .iter()
        .filter(|r| r.method == method)
        .map(|r| &r.summary)
        .collect();
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some((
        rows.iter().map(|s| s.accuracy.id).sum::<f64>() / n,
        rows.iter().map(|s| s.accuracy.ood_average).sum::<f64>() / n,
    ))
}

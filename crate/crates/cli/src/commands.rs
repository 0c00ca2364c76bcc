//! Standalone reports: message sizes, noise calibration and partition statistics.

use std::fmt::Write as _;

use feddm_core::accounting::{self, PayloadReport};
use feddm_core::data::{dirichlet_partition, effective_classes, label_entropy, tv_from_uniform, Dataset};
use feddm_core::privacy::{check_budget, gaussian_sigma, simplified_tailbound_sigma, tailbound_sigma, DpBudget};
use feddm_core::seeds::{derive_seed, Stream};

use crate::experiment::Failure;

/// Share of a client's examples a class needs to count as effectively present.
pub const EFFECTIVE_SHARE: f64 = 0.05;

fn config_err(e: feddm_core::Error) -> Failure {
    Failure::Config(e.to_string())
}

pub fn calibrate_dp(epsilon: f64, delta: f64, q: Option<f64>, steps: Option<u64>) -> Result<String, Failure> {
    let budget = DpBudget::new(epsilon, delta).map_err(config_err)?;
    let mut out = String::new();
    let _ = writeln!(out, "epsilon                 {epsilon}");
    let _ = writeln!(out, "delta                   {delta}");
    let _ = writeln!(out, "gaussian sigma          {:.6}", gaussian_sigma(epsilon, delta).map_err(config_err)?);
    let _ = writeln!(out, "simplified tail sigma   {:.6}", simplified_tailbound_sigma(&budget));
    match (q, steps) {
        (Some(q), Some(t)) => {
            let _ = writeln!(out, "q                       {q}");
            let _ = writeln!(out, "steps                   {t}");
            let _ = writeln!(out, "T*q^2 <= epsilon/2      {}", check_budget(q, t, epsilon));
            match tailbound_sigma(&budget, q, t) {
                Ok(s) => {
                    let _ = writeln!(out, "tail-bound sigma        {s:.6}");
                }
                Err(e) => {
                    let _ = writeln!(out, "tail-bound sigma        unavailable ({e})");
                }
            }
        }
        (None, None) => {}
        _ => return Err(Failure::Config("--q and --steps must be given together".into())),
    }
    Ok(out)
}

/// Per-client class histograms of a Dirichlet split.
pub fn partition_stats(data: &Dataset, clients: usize, alpha: f64, seed: u64) -> Result<String, Failure> {
    let c = data.num_classes();
    let partition = dirichlet_partition(
        data.labels(),
        c,
        clients,
        alpha,
        derive_seed(seed, Stream::Partition, 0, 0),
    )
    .map_err(config_err)?;
    let hists = partition.class_histograms(data.labels(), c);
    let mut out = String::new();
    let _ = writeln!(out, "dataset {} ({} examples, {c} classes), K={clients}, alpha={alpha}, seed={seed}", data.name(), data.len());
    let _ = writeln!(out, "client,size,classes,entropy,tv_uniform,histogram");
    let (mut entropy, mut effective) = (0.0, 0.0);
    for (k, h) in hists.iter().enumerate() {
        let present = h.iter().filter(|&&n| n > 0).count();
        let e = label_entropy(h);
        entropy += e;
        effective += effective_classes(h, EFFECTIVE_SHARE) as f64;
        let hist: Vec<String> = h.iter().map(usize::to_string).collect();
        let _ = writeln!(
            out,
            "{k},{},{present},{e:.4},{:.4},{}",
            h.iter().sum::<usize>(),
            tv_from_uniform(h),
            hist.join(" ")
        );
    }
    let _ = writeln!(out, "mean entropy {:.4}", entropy / clients as f64);
    let _ = writeln!(
        out,
        "mean effective classes (share >= {EFFECTIVE_SHARE}) {:.3}",
        effective / clients as f64
    );
    Ok(out)
}

/// Synthetic and weight payloads for a split of `data`.
pub fn msgsize_for_data(
    data: &Dataset,
    clients: usize,
    alpha: f64,
    seed: u64,
    ipc: usize,
    param_count: usize,
    rounds: u64,
) -> Result<(PayloadReport, PayloadReport), Failure> {
    let partition = dirichlet_partition(
        data.labels(),
        data.num_classes(),
        clients,
        alpha,
        derive_seed(seed, Stream::Partition, 0, 0),
    )
    .map_err(config_err)?;
    let cpc = partition.classes_per_client(data.labels(), data.num_classes());
    Ok((
        PayloadReport::synthetic(&cpc, ipc, data.example_len()).over_rounds(rounds),
        PayloadReport::weights(param_count, clients).over_rounds(rounds),
    ))
}

pub fn msgsize_fixture(name: &str, rounds: u64) -> Result<PayloadReport, Failure> {
    let f = accounting::fixture(name).ok_or_else(|| {
        let names: Vec<&str> = accounting::FIXTURES.iter().map(|f| f.name).collect();
        Failure::Config(format!("unknown fixture {name:?}; available: {}", names.join(", ")))
    })?;
    Ok(PayloadReport::synthetic(f.classes_per_client, f.ipc, f.example_floats).over_rounds(rounds))
}

pub fn render(report: &PayloadReport, csv: bool) -> String {
    if csv {
        report.to_csv()
    } else {
        report.to_text()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use feddm_core::data::gen_blobs;

    #[test]
    fn calibration_report() {
        let text = calibrate_dp(1.0, 1e-5, None, None).unwrap();
        assert!(text.contains("gaussian sigma          4.844"));
        let text = calibrate_dp(2.0, 1e-5, Some(0.01), Some(100)).unwrap();
        assert!(text.contains("tail-bound sigma        2.405"));
        let text = calibrate_dp(1.0, 1e-5, Some(0.5), Some(10)).unwrap();
        assert!(text.contains("unavailable"));
        assert!(calibrate_dp(1.0, 1e-5, Some(0.5), None).is_err());
        assert_eq!(calibrate_dp(-1.0, 1e-5, None, None).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn partition_report_lists_every_client() {
        let d = gen_blobs(50, 4, 2, 0.5, 0).unwrap();
        let text = partition_stats(&d, 5, 0.1, 0).unwrap();
        assert_eq!(text.lines().filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit())).count(), 5);
        assert!(text.contains("mean entropy"));
    }

    #[test]
    fn fixture_and_data_payloads() {
        assert_eq!(msgsize_fixture("cifar10-dir0.5", 1).unwrap().round_total, 2_672_640);
        assert!(msgsize_fixture("nope", 1).is_err());
        let d = gen_blobs(50, 4, 2, 0.5, 0).unwrap();
        let (syn, w) = msgsize_for_data(&d, 5, 0.5, 0, 10, 100, 3).unwrap();
        assert_eq!(w.cumulative, 1500);
        assert!(syn.round_total <= 5 * 4 * 10 * 2);
        assert!(render(&syn, true).starts_with("client,"));
    }
}

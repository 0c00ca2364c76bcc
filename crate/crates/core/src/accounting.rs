//! Upload size per round, counted in floats.
//!
//! Synthetic-payload protocols (FedDM, REAL) upload `cpc_k × ipc` examples per
//! client, where `cpc_k` is the number of classes client `k` holds. Weight-based
//! protocols upload one full parameter vector per client.

use std::fmt::Write as _;

use crate::data::Partition;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientPayload {
    pub client: usize,
    /// Classes present at the client (zero for weight payloads).
    pub classes: usize,
    pub ipc: usize,
    pub floats: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PayloadKind {
    Synthetic { example_floats: usize },
    Weights { param_count: usize },
}

/// Per-client payloads of one round, plus the running total over `rounds`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PayloadReport {
    pub kind: PayloadKind,
    pub clients: Vec<ClientPayload>,
    pub round_total: u64,
    pub rounds: u64,
    pub cumulative: u64,
}

/// `Σ_k cpc_k × ipc × example_floats`.
pub fn feddm_message_size_from_cpc(classes_per_client: &[usize], ipc: usize, example_floats: usize) -> u64 {
    classes_per_client
        .iter()
        .map(|&c| (c * ipc * example_floats) as u64)
        .sum()
}

/// Synthetic payload for a partition of `labels`.
pub fn feddm_message_size(
    partition: &Partition,
    labels: &[usize],
    num_classes: usize,
    ipc: usize,
    example_floats: usize,
) -> u64 {
    feddm_message_size_from_cpc(
        &partition.classes_per_client(labels, num_classes),
        ipc,
        example_floats,
    )
}

/// `param_count × clients`.
pub fn baseline_message_size(param_count: usize, clients: usize) -> u64 {
    param_count as u64 * clients as u64
}

impl PayloadReport {
    pub fn synthetic(classes_per_client: &[usize], ipc: usize, example_floats: usize) -> Self {
        let clients: Vec<ClientPayload> = classes_per_client
            .iter()
            .enumerate()
            .map(|(client, &classes)| ClientPayload {
                client,
                classes,
                ipc,
                floats: (classes * ipc * example_floats) as u64,
            })
            .collect();
        Self::from_clients(PayloadKind::Synthetic { example_floats }, clients)
    }

    pub fn weights(param_count: usize, num_clients: usize) -> Self {
        let clients = (0..num_clients)
            .map(|client| ClientPayload {
                client,
                classes: 0,
                ipc: 0,
                floats: param_count as u64,
            })
            .collect();
        Self::from_clients(PayloadKind::Weights { param_count }, clients)
    }

    fn from_clients(kind: PayloadKind, clients: Vec<ClientPayload>) -> Self {
        let round_total = clients.iter().map(|c| c.floats).sum();
        PayloadReport {
            kind,
            clients,
            round_total,
            rounds: 1,
            cumulative: round_total,
        }
    }

    pub fn over_rounds(mut self, rounds: u64) -> Self {
        self.rounds = rounds;
        self.cumulative = self.round_total * rounds;
        self
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match self.kind {
            PayloadKind::Synthetic { example_floats } => {
                let _ = writeln!(out, "payload: synthetic examples ({example_floats} floats each)");
            }
            PayloadKind::Weights { param_count } => {
                let _ = writeln!(out, "payload: model weights ({param_count} floats each)");
            }
        }
        let _ = writeln!(out, "{:>8} {:>8} {:>6} {:>14}", "client", "classes", "ipc", "floats");
        for c in &self.clients {
            let _ = writeln!(out, "{:>8} {:>8} {:>6} {:>14}", c.client, c.classes, c.ipc, c.floats);
        }
        let _ = writeln!(out, "{:>24} {:>14}", "per round", self.round_total);
        let _ = writeln!(out, "{:>24} {:>14}", format!("over {} rounds", self.rounds), self.cumulative);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("client,classes,ipc,floats\n");
        for c in &self.clients {
            let _ = writeln!(out, "{},{},{},{}", c.client, c.classes, c.ipc, c.floats);
        }
        let _ = writeln!(out, "round_total,,,{}", self.round_total);
        let _ = writeln!(out, "cumulative,,,{}", self.cumulative);
        out
    }
}

/// Stored per-client class counts for ten-client Dirichlet splits of MNIST
/// (784 floats, ipc 10), CIFAR-10 (3072 floats, ipc 10) and CIFAR-100
/// (3072 floats, ipc 5), with the upload sizes they produce.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub name: &'static str,
    pub classes_per_client: &'static [usize],
    pub ipc: usize,
    pub example_floats: usize,
    pub expected: u64,
}

pub const MNIST_FLOATS: usize = 28 * 28;
pub const CIFAR_FLOATS: usize = 3 * 32 * 32;

pub const FIXTURES: &[Fixture] = &[
    Fixture { name: "mnist-dir0.5", classes_per_client: &[9, 8, 8, 8, 8, 8, 8, 8, 8, 8], ipc: 10, example_floats: MNIST_FLOATS, expected: 635_040 },
    Fixture { name: "cifar10-dir0.5", classes_per_client: &[9, 9, 9, 9, 9, 9, 9, 8, 8, 8], ipc: 10, example_floats: CIFAR_FLOATS, expected: 2_672_640 },
    Fixture { name: "cifar100-dir0.5", classes_per_client: &[66, 66, 66, 66, 65, 65, 65, 65, 65, 65], ipc: 5, example_floats: CIFAR_FLOATS, expected: 10_045_440 },
    Fixture { name: "mnist-dir0.1", classes_per_client: &[5, 5, 5, 5, 5, 5, 5, 4, 4, 4], ipc: 10, example_floats: MNIST_FLOATS, expected: 368_480 },
    Fixture { name: "cifar10-dir0.1", classes_per_client: &[5, 5, 5, 5, 4, 4, 4, 4, 4, 4], ipc: 10, example_floats: CIFAR_FLOATS, expected: 1_351_680 },
    Fixture { name: "cifar100-dir0.1", classes_per_client: &[31; 10], ipc: 5, example_floats: CIFAR_FLOATS, expected: 4_761_600 },
    Fixture { name: "mnist-dir0.01", classes_per_client: &[2, 2, 2, 2, 1, 1, 1, 1, 1, 1], ipc: 10, example_floats: MNIST_FLOATS, expected: 109_760 },
    Fixture { name: "cifar10-dir0.01", classes_per_client: &[2, 2, 2, 2, 2, 1, 1, 1, 1, 1], ipc: 10, example_floats: CIFAR_FLOATS, expected: 460_800 },
    Fixture { name: "cifar100-dir0.01", classes_per_client: &[14, 14, 14, 14, 14, 14, 14, 14, 14, 13], ipc: 5, example_floats: CIFAR_FLOATS, expected: 2_135_040 },
];

/// Weight-payload reference sizes: `(name, per-model parameter count, clients, expected)`.
pub const BASELINE_FIXTURES: &[(&str, usize, usize, u64)] = &[
    ("mnist-convnet", 317_706, 10, 3_177_060),
    ("cifar10-convnet", 320_010, 10, 3_200_100),
    ("cifar100-convnet", 504_420, 10, 5_044_200),
];

pub fn fixture(name: &str) -> Option<&'static Fixture> {
    FIXTURES.iter().find(|f| f.name == name)
}

use std::collections::BTreeMap;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::ModelState;
use crate::si::SiState;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferEvent {
    pub seq: usize,
    pub from: usize,
    pub to: usize,
    pub bytes: u64,
    pub round: usize,
    /// Cumulative training epochs of the run when the model left.
    pub epoch_mark: usize,
}

/// Ordered record of every model hand-off in one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommLedger {
    events: Vec<TransferEvent>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[TransferEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.events.iter().map(|e| e.bytes).sum()
    }

    /// Transfer count per directed `(from, to)` pair.
    pub fn totals(&self) -> BTreeMap<(usize, usize), usize> {
        let mut m = BTreeMap::new();
        for e in &self.events {
            *m.entry((e.from, e.to)).or_insert(0) += 1;
        }
        m
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seq,from,to,bytes,round\n");
        for e in &self.events {
            s.push_str(&format!("{},{},{},{},{}\n", e.seq, e.from, e.to, e.bytes, e.round));
        }
        s
    }

    pub(crate) fn record(&mut self, from: usize, to: usize, bytes: u64, round: usize, epoch_mark: usize) {
        self.events.push(TransferEvent {
            seq: self.events.len(),
            from,
            to,
            bytes,
            round,
            epoch_mark,
        });
    }
}

fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Ships a model (and SI state) from one center to the next through the checkpoint format,
/// recording the exact byte count. Returns what the receiver decoded.
pub fn transfer(
    model: &ModelState<f32>,
    si: Option<&SiState<f32>>,
    from: usize,
    to: usize,
    round: usize,
    epoch_mark: usize,
    ledger: &mut CommLedger,
) -> Result<(ModelState<f32>, Option<SiState<f32>>)> {
    if from == to {
        return Err(Error::SelfTransfer(from));
    }
    let bytes = checkpoint::encode(model, si)?;
    ledger.record(from, to, bytes.len() as u64, round, epoch_mark);
    let (mut received, received_si) = checkpoint::decode(&bytes)?;
    let model_ok = received.layers() == model.layers() && same_bits(received.theta(), model.theta());
    let si_ok = match (si, &received_si) {
        (None, None) => true,
        (Some(a), Some(b)) => {
            same_bits(a.w_acc(), b.w_acc())
                && same_bits(a.omega(), b.omega())
                && same_bits(a.anchor(), b.anchor())
                && same_bits(a.prev_final(), b.prev_final())
                && a.c().to_bits() == b.c().to_bits()
                && a.xi().to_bits() == b.xi().to_bits()
                && a.center_index() == b.center_index()
        }
        _ => false,
    };
    if !(model_ok && si_ok) {
        return Err(Error::Checkpoint("transfer round-trip mismatch".into()));
    }
    received.set_version(model.version());
    Ok((received, received_si))
}

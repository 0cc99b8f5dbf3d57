//! Draft and verifier as two threads exchanging one message each way per
//! round over channels, driven by a shared virtual clock.
//!
//! Round `T` starts at `s_T`. The draft side sends `DraftToVerifier(T)` at
//! `s_T` carrying the speculations to verify and the hit bitmap of the
//! previous lookup, then fills its caches (done at `s_T + T_p`). The verifier
//! answers with `VerifierToDraft(T)` at `s_T + 1`. The last round's lookup is
//! local to the draft side, so `N` rounds produce exactly `N` messages in each
//! direction.

use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread;

use serde::Serialize;
use serde_json::json;

use super::sides::{DraftSide, VerifierSide};
use super::{round_latency, Mode, RunStats, SimConfig, SimError};
use crate::specdec::{Origin, Speculation, VerificationOutcome};

const CLOCK_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub enum WireMessage {
    VerifierToDraft {
        round: u64,
        outcomes: Vec<VerificationOutcome>,
        seq_lengths: Vec<u64>,
        vclock: f64,
    },
    DraftToVerifier {
        round: u64,
        /// Empty in round 0, which has no preceding lookup.
        hits: Vec<bool>,
        speculations: Vec<Speculation>,
        vclock: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranscriptEntry {
    pub round: u64,
    pub dir: &'static str,
    pub payload_summary: serde_json::Value,
    pub vclock: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessOutput {
    pub transcript: Vec<TranscriptEntry>,
    pub stats: RunStats,
    pub messages_v2d: u64,
    pub messages_d2v: u64,
}

impl HarnessOutput {
    /// One JSON object per line, in send order.
    pub fn transcript_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.transcript {
            out.push_str(&serde_json::to_string(e).expect("transcript entries serialize"));
            out.push('\n');
        }
        out
    }
}

fn summarize_d2v(hits: &[bool], specs: &[Speculation]) -> serde_json::Value {
    let origins: Vec<&str> = specs
        .iter()
        .map(|s| match s.origin() {
            Origin::Primary => "primary",
            Origin::Backup => "backup",
        })
        .collect();
    let tokens: Vec<&[usize]> = specs.iter().map(|s| s.tokens()).collect();
    let dist_values: usize = specs
        .iter()
        .map(|s| s.draft_dists().iter().map(|d| d.len()).sum::<usize>())
        .sum();
    json!({ "hits": hits, "tokens": tokens, "origins": origins, "dist_values": dist_values })
}

fn summarize_v2d(outcomes: &[VerificationOutcome], lengths: &[u64]) -> serde_json::Value {
    let pairs: Vec<[usize; 2]> = outcomes.iter().map(|o| [o.accepted, o.bonus]).collect();
    json!({ "outcomes": pairs, "seq_lengths": lengths })
}

fn closed(side: &str) -> SimError {
    SimError::ProtocolViolation(format!("{side} channel closed early"))
}

fn verifier_loop(
    mut side: VerifierSide,
    rounds: u64,
    rx: Receiver<WireMessage>,
    tx: Sender<WireMessage>,
) -> Result<(Vec<TranscriptEntry>, u64), SimError> {
    let mut log = Vec::with_capacity(rounds as usize);
    let mut last_done = 0.0_f64;
    let mut sent = 0;
    for expected in 0..rounds {
        let msg = rx.recv().map_err(|_| closed("draft-to-verifier"))?;
        let (round, speculations, vclock) = match msg {
            WireMessage::DraftToVerifier {
                round,
                speculations,
                vclock,
                ..
            } => (round, speculations, vclock),
            other => {
                return Err(SimError::ProtocolViolation(format!(
                    "verifier received {other:?}"
                )))
            }
        };
        if round != expected {
            return Err(SimError::ProtocolViolation(format!(
                "verifier expected round {expected}, got {round}"
            )));
        }
        if vclock + CLOCK_TOL < last_done {
            return Err(SimError::ProtocolViolation(format!(
                "round {round} starts at {vclock} before previous verification ended at {last_done}"
            )));
        }
        let results = side.verify_round(&speculations)?;
        let outcomes: Vec<_> = results.iter().map(|r| r.outcome).collect();
        let done = vclock + 1.0;
        last_done = done;
        log.push(TranscriptEntry {
            round,
            dir: "v2d",
            payload_summary: summarize_v2d(&outcomes, side.lengths()),
            vclock: done,
        });
        tx.send(WireMessage::VerifierToDraft {
            round,
            outcomes,
            seq_lengths: side.lengths().to_vec(),
            vclock: done,
        })
        .map_err(|_| closed("verifier-to-draft"))?;
        sent += 1;
    }
    if let Ok(extra) = rx.recv() {
        return Err(SimError::ProtocolViolation(format!(
            "verifier received a message after the last round: {extra:?}"
        )));
    }
    Ok((log, sent))
}

fn draft_loop(
    mut side: DraftSide,
    cfg: &SimConfig,
    rx: Receiver<WireMessage>,
    tx: Sender<WireMessage>,
) -> Result<(Vec<TranscriptEntry>, RunStats, u64), SimError> {
    let mut log = Vec::with_capacity(cfg.rounds as usize);
    let mut stats = RunStats::new(Mode::Ssd, cfg.batch_size);
    let mut prev_hits: Vec<bool> = Vec::new();
    let mut sent = 0;
    let t_p = cfg.timing.t_p;
    for round in 0..cfg.rounds {
        let start = stats.vtime;
        let specs = side.speculations();
        log.push(TranscriptEntry {
            round,
            dir: "d2v",
            payload_summary: summarize_d2v(&prev_hits, &specs),
            vclock: start,
        });
        tx.send(WireMessage::DraftToVerifier {
            round,
            hits: std::mem::take(&mut prev_hits),
            speculations: specs.clone(),
            vclock: start,
        })
        .map_err(|_| closed("draft-to-verifier"))?;
        sent += 1;

        side.build_caches()?;
        let cache_ready = start + t_p;

        let msg = rx.recv().map_err(|_| closed("verifier-to-draft"))?;
        let WireMessage::VerifierToDraft {
            round: got,
            outcomes,
            seq_lengths,
            vclock,
        } = msg
        else {
            return Err(SimError::ProtocolViolation(format!(
                "draft side received {msg:?}"
            )));
        };
        if got != round {
            return Err(SimError::ProtocolViolation(format!(
                "draft side expected round {round}, got {got}"
            )));
        }
        if (vclock - (start + 1.0)).abs() > CLOCK_TOL {
            return Err(SimError::ProtocolViolation(format!(
                "verification of round {round} ended at {vclock}, expected {}",
                start + 1.0
            )));
        }
        if t_p < 1.0 && cache_ready > vclock + CLOCK_TOL {
            return Err(SimError::ProtocolViolation(format!(
                "cache for round {round} ready at {cache_ready}, after verification at {vclock}"
            )));
        }
        let hits = side.absorb(&outcomes)?;
        if seq_lengths != side.lengths() {
            return Err(SimError::ProtocolViolation(format!(
                "sequence lengths diverged in round {round}: {seq_lengths:?} vs {:?}",
                side.lengths()
            )));
        }
        for (i, (o, &hit)) in outcomes.iter().zip(&hits).enumerate() {
            let mut emitted = specs[i].tokens()[..o.accepted].to_vec();
            emitted.push(o.bonus);
            stats.record_round(i, specs[i].origin(), o.accepted, &emitted, hit, cfg.record);
        }
        let all_hit = hits.iter().all(|&h| h);
        stats.all_hit_rounds += u64::from(all_hit);
        stats.rounds += 1;
        stats.vtime += round_latency(&cfg.timing, all_hit);
        prev_hits = hits;
    }
    Ok((log, stats, sent))
}

/// Run SSD with the draft and verifier on separate threads. The resulting
/// statistics equal [`super::run_ssd_batch`] for the same config.
pub fn run_protocol_harness(cfg: &SimConfig) -> Result<HarnessOutput, SimError> {
    cfg.validate()?;
    let verifier = VerifierSide::new(cfg);
    let drafter = DraftSide::new(cfg)?;
    let (d2v_tx, d2v_rx) = channel();
    let (v2d_tx, v2d_rx) = channel();
    let rounds = cfg.rounds;
    let (v_res, d_res) = thread::scope(|s| {
        let v = s.spawn(move || verifier_loop(verifier, rounds, d2v_rx, v2d_tx));
        let d = s.spawn(move || draft_loop(drafter, cfg, v2d_rx, d2v_tx));
        (
            v.join().expect("verifier thread panicked"),
            d.join().expect("draft thread panicked"),
        )
    });
    // A failing side closes its channels, so report the root cause first.
    let is_closed =
        |e: &SimError| matches!(e, SimError::ProtocolViolation(m) if m.contains("closed early"));
    let (v_log, v_sent, d_log, stats, d_sent) = match (v_res, d_res) {
        (Ok((vl, vs)), Ok((dl, st, ds))) => (vl, vs, dl, st, ds),
        (Err(e), Ok(_)) | (Ok(_), Err(e)) => return Err(e),
        (Err(ve), Err(de)) => return Err(if is_closed(&ve) { de } else { ve }),
    };
    if v_sent != rounds || d_sent != rounds {
        return Err(SimError::ProtocolViolation(format!(
            "{rounds} rounds but {d_sent} draft and {v_sent} verifier messages"
        )));
    }
    let mut transcript = Vec::with_capacity(2 * rounds as usize);
    for (d, v) in d_log.into_iter().zip(v_log) {
        transcript.push(d);
        transcript.push(v);
    }
    Ok(HarnessOutput {
        transcript,
        stats,
        messages_v2d: v_sent,
        messages_d2v: d_sent,
    })
}

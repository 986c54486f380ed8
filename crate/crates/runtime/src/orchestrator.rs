//! Two-party private inference runs and their reports.
//!
//! The client is simulated here: it encodes the input batch, splits it into
//! additive shares, hands one share to each party and checks the opened
//! logits against plaintext evaluation.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use arp_core::fixnum::{decode, encode};
use arp_core::nn::{argmax_rows, NnError};
use arp_core::{FixedConfig, FixedError, RingTensor, Tensor};
use arp_mpc::dealer::{DealerError, Planner, Request, Tape};
use arp_mpc::{Channel, Counters, Dealer, PartyId, Phase, ProtocolError, Session, ShareTensor, TransportError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model_file::{ModelFile, ModelFileError};
use crate::secure::{secure_forward, ExportError, PublicModel};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    ModelFile(#[from] ModelFileError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Fixed(#[from] FixedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Input(String),
}

impl RunError {
    /// 2 protocol desync, 3 tape exhaustion, 4 I/O or format, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Protocol(ProtocolError::Transport(TransportError::Desync(_)))
            | RunError::Protocol(ProtocolError::Dealer(DealerError::Mismatch { .. })) => 2,
            RunError::Protocol(ProtocolError::Dealer(DealerError::TapeExhausted(_))) => 3,
            RunError::Protocol(ProtocolError::Dealer(DealerError::Format(_) | DealerError::Io(_)))
            | RunError::Protocol(ProtocolError::Transport(TransportError::Io(_)))
            | RunError::ModelFile(_)
            | RunError::Io(_)
            | RunError::Fixed(_)
            | RunError::Input(_) => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    /// Client-side input sharing.
    pub client: u64,
    /// Dealer randomness.
    pub dealer: u64,
}

impl Seeds {
    pub fn from_base(seed: u64) -> Self {
        Seeds {
            client: seed.wrapping_mul(2).wrapping_add(1),
            dealer: seed.wrapping_mul(2).wrapping_add(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Listen(String),
    Connect(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mode {
    /// Both parties as threads joined by in-process channels.
    Memory,
    /// Both parties as threads joined by a loopback TCP connection.
    TcpLoopback,
    /// This process runs one party over TCP.
    TcpParty { party: PartyId, endpoint: Endpoint },
}

/// What one party observed.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyOutcome {
    pub party: PartyId,
    pub logits: Tensor<f64>,
    pub counters: [Counters; 5],
    pub times: [Duration; 5],
    pub transcript: [u8; 32],
}

/// Request sequence of one forward pass over `batch` examples.
pub fn plan(model: &PublicModel, batch: usize) -> Result<Vec<Request>, RunError> {
    let bits = model.cfg.total_bits();
    let mut s = Session::new(Channel::dry(PartyId::P0, bits), Planner::new(bits), model.cfg);
    let mut shape = vec![batch];
    shape.extend_from_slice(&model.input_shape);
    let x = ShareTensor {
        party: PartyId::P0,
        payload: RingTensor::zeros(&shape, bits),
        scale: model.cfg.frac_bits(),
    };
    secure_forward(&mut s, model, x)?;
    Ok(s.into_parts().1.into_requests())
}

/// Deals both tapes for one forward pass; returns them with the dealing time.
pub fn deal(model: &PublicModel, batch: usize, seed: u64) -> Result<(Tape, Tape, Duration), RunError> {
    let start = Instant::now();
    let requests = plan(model, batch)?;
    let (t0, t1) = Dealer::new(model.cfg, seed)
        .deal(&requests)
        .map_err(ProtocolError::from)?;
    Ok((t0, t1, start.elapsed()))
}

/// Client-side encoding and splitting of the input batch.
pub fn client_shares(model: &PublicModel, x: &Tensor<f64>, seed: u64) -> Result<(RingTensor, RingTensor), RunError> {
    if x.shape().len() < 2 || x.shape()[1..] != model.input_shape[..] {
        return Err(RunError::Input(format!(
            "input batch {:?} does not match model input {:?}",
            x.shape(),
            model.input_shape
        )));
    }
    let enc = encode(x, &model.cfg)?;
    Ok(Dealer::new(model.cfg, seed).gen_shares(&enc))
}

/// One party's online phase: forward on its share, then both parties open
/// the logits.
pub fn run_party(chan: Channel, tape: Tape, model: &PublicModel, share: RingTensor) -> Result<PartyOutcome, RunError> {
    let party = chan.party();
    let mut s = Session::new(chan, tape, model.cfg);
    let x = ShareTensor {
        party,
        payload: share,
        scale: model.cfg.frac_bits(),
    };
    let y = secure_forward(&mut s, model, x)?;
    let opened = s.in_phase(Phase::Output, |s| s.open(&y))?;
    let times = s.phase_times();
    let chan = s.channel();
    Ok(PartyOutcome {
        party,
        logits: decode(&opened, &model.cfg),
        counters: Phase::ALL.map(|p| chan.counters(p)),
        times,
        transcript: chan.transcript_digest(),
    })
}

fn run_pair(c0: Channel, c1: Channel, t0: Tape, t1: Tape, model: &PublicModel, x0: RingTensor, x1: RingTensor) -> Result<Vec<PartyOutcome>, RunError> {
    let (r0, r1) = std::thread::scope(|s| {
        let h = s.spawn(|| run_party(c1, t1, model, x1));
        let r0 = run_party(c0, t0, model, x0);
        (r0, h.join().expect("party 1 thread panicked"))
    });
    Ok(vec![r0?, r1?])
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceReport {
    pub batch: usize,
    pub relu_elements: usize,
    pub plaintext_logits: Tensor<f64>,
    pub private_logits: Tensor<f64>,
    pub agreement: f64,
    pub max_abs_deviation: f64,
    /// Declared worst-case logit error in real units.
    pub error_bound: f64,
    pub ulp: f64,
    pub dealer_time: Duration,
    /// One entry per party run by this process.
    pub parties: Vec<PartyOutcome>,
}

impl InferenceReport {
    pub fn transcript_hex(&self) -> String {
        hex::encode(self.parties[0].transcript)
    }

    /// Counters summed over the parties in this report.
    pub fn phase_counters(&self, phase: Phase) -> Counters {
        let mut c = Counters::default();
        for p in &self.parties {
            let q = p.counters[phase.index()];
            c.bytes_sent += q.bytes_sent;
            c.bytes_received += q.bytes_received;
            c.words_sent += q.words_sent;
            c.rounds = c.rounds.max(q.rounds);
        }
        c
    }

    pub fn phase_time(&self, phase: Phase) -> Duration {
        self.parties.iter().map(|p| p.times[phase.index()]).max().unwrap_or_default()
    }

    pub fn total_bytes(&self) -> u64 {
        Phase::ALL.iter().map(|&p| self.phase_counters(p).bytes_sent).sum()
    }

    pub fn total_rounds(&self) -> u64 {
        Phase::ALL.iter().map(|&p| self.phase_counters(p).rounds).sum()
    }

    /// `phase,bytes_sent,bytes_received,rounds,words_sent,seconds`, with a
    /// dealer row and a total row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,bytes_sent,bytes_received,rounds,words_sent,seconds\n");
        let _ = writeln!(s, "dealer,0,0,0,0,{:.6}", self.dealer_time.as_secs_f64());
        for p in Phase::ALL {
            let c = self.phase_counters(p);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6}",
                p.name(),
                c.bytes_sent,
                c.bytes_received,
                c.rounds,
                c.words_sent,
                self.phase_time(p).as_secs_f64()
            );
        }
        let total: Duration = Phase::ALL.iter().map(|&p| self.phase_time(p)).sum();
        let _ = writeln!(
            s,
            "total,{},{},{},{},{:.6}",
            self.total_bytes(),
            Phase::ALL.iter().map(|&p| self.phase_counters(p).bytes_received).sum::<u64>(),
            self.total_rounds(),
            Phase::ALL.iter().map(|&p| self.phase_counters(p).words_sent).sum::<u64>(),
            total.as_secs_f64()
        );
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "batch {} | relu elements {} | agreement {:.4} | max |dev| {:.3e} (bound {:.3e} = {:.1} ulp) | bytes {} | rounds {} | transcript {}",
            self.batch,
            self.relu_elements,
            self.agreement,
            self.max_abs_deviation,
            self.error_bound,
            self.error_bound / self.ulp,
            self.total_bytes(),
            self.total_rounds(),
            self.transcript_hex()
        )
    }

    /// Private logits, one row per example.
    pub fn logits_csv(&self) -> String {
        let cols = self.private_logits.shape()[1];
        let mut s = (0..cols).map(|j| format!("y{j}")).collect::<Vec<_>>().join(",");
        s.push('\n');
        for row in self.private_logits.data().chunks(cols) {
            s.push_str(&row.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","));
            s.push('\n');
        }
        s
    }
}

/// File name of a party's tape inside a tape directory.
pub fn tape_file(party: PartyId) -> String {
    format!("party{}.arpt", party.index())
}

fn load_tape(dir: &Path, party: PartyId, cfg: FixedConfig) -> Result<Tape, RunError> {
    let t = Tape::load(&dir.join(tape_file(party))).map_err(ProtocolError::from)?;
    if t.party() != party || t.config() != cfg {
        let msg = format!("tape for {:?} at L={} f={}", t.party(), t.config().total_bits(), t.config().frac_bits());
        return Err(ProtocolError::from(DealerError::Format(msg)).into());
    }
    Ok(t)
}

/// Evaluates `x` privately and compares against plaintext inference.
pub fn run_private_inference(file: &ModelFile, x: &Tensor<f64>, mode: &Mode, seeds: Seeds) -> Result<InferenceReport, RunError> {
    run_with_tapes(file, x, mode, seeds, None)
}

/// As [`run_private_inference`], reading preprocessing from a tape directory
/// instead of dealing it.
pub fn run_with_tapes(file: &ModelFile, x: &Tensor<f64>, mode: &Mode, seeds: Seeds, tapes: Option<&Path>) -> Result<InferenceReport, RunError> {
    let model = PublicModel::new(&file.model, file.cfg)?;
    let batch = x.shape().first().copied().unwrap_or(0);
    let (x0, x1) = client_shares(&model, x, seeds.client)?;
    let (t0, t1, dealer_time) = match tapes {
        None => deal(&model, batch, seeds.dealer)?,
        Some(dir) => {
            let only = match mode {
                Mode::TcpParty { party, .. } => Some(*party),
                _ => None,
            };
            let get = |p: PartyId| match only {
                Some(q) if q != p => Ok(Tape::new(p, model.cfg)),
                _ => load_tape(dir, p, model.cfg),
            };
            (get(PartyId::P0)?, get(PartyId::P1)?, Duration::ZERO)
        }
    };
    let bits = model.cfg.total_bits();
    let parties = match mode {
        Mode::Memory => {
            let (c0, c1) = Channel::memory_pair(bits);
            run_pair(c0, c1, t0, t1, &model, x0, x1)?
        }
        Mode::TcpLoopback => {
            let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?;
            let (c0, c1) = std::thread::scope(|s| {
                let h = s.spawn(|| Channel::tcp_connect(PartyId::P1, bits, addr, Duration::from_secs(10)));
                let c0 = listener
                    .accept()
                    .map_err(TransportError::from)
                    .and_then(|(stream, _)| Channel::from_tcp(PartyId::P0, bits, stream));
                (c0, h.join().expect("connect thread panicked"))
            });
            let c0 = c0.map_err(ProtocolError::from)?;
            let c1 = c1.map_err(ProtocolError::from)?;
            run_pair(c0, c1, t0, t1, &model, x0, x1)?
        }
        Mode::TcpParty { party, endpoint } => {
            let chan = match endpoint {
                Endpoint::Listen(addr) => Channel::tcp_listen(*party, bits, addr.as_str()),
                Endpoint::Connect(addr) => Channel::tcp_connect(*party, bits, addr.as_str(), Duration::from_secs(30)),
            }
            .map_err(ProtocolError::from)?;
            let (tape, share) = match party {
                PartyId::P0 => (t0, x0),
                PartyId::P1 => (t1, x1),
            };
            vec![run_party(chan, tape, &model, share)?]
        }
    };
    report(file, &model, x, parties, dealer_time)
}

fn report(file: &ModelFile, model: &PublicModel, x: &Tensor<f64>, parties: Vec<PartyOutcome>, dealer_time: Duration) -> Result<InferenceReport, RunError> {
    let plain = file.model.predict(x)?;
    let private = parties[0].logits.clone();
    let batch = x.shape()[0];
    let agree = argmax_rows(&plain)
        .iter()
        .zip(argmax_rows(&private))
        .filter(|(a, b)| **a == *b)
        .count();
    let max_abs_deviation = plain
        .data()
        .iter()
        .zip(private.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(InferenceReport {
        batch,
        relu_elements: model.relu_count() * batch,
        plaintext_logits: plain,
        private_logits: private,
        agreement: if batch == 0 { 1.0 } else { agree as f64 / batch as f64 },
        max_abs_deviation,
        error_bound: model.error_bound(x)?,
        ulp: model.cfg.ulp(),
        dealer_time,
        parties,
    })
}

/// Uniform inputs in `[-1, 1]` with the model's example shape.
pub fn synthetic_batch(model_input: &[usize], batch: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![batch];
    shape.extend_from_slice(model_input);
    let n = arp_core::numel(&shape);
    Tensor::from_vec(&shape, (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub batch: usize,
    pub phase: &'static str,
    pub bytes: u64,
    pub rounds: u64,
    pub seconds: f64,
}

/// In-memory runs over synthetic batches of each size.
pub fn bench(file: &ModelFile, batches: &[usize], seeds: Seeds) -> Result<Vec<BenchRow>, RunError> {
    let mut rows = Vec::new();
    for &b in batches {
        let x = synthetic_batch(file.model.input_shape(), b, seeds.client);
        let r = run_private_inference(file, &x, &Mode::Memory, seeds)?;
        rows.push(BenchRow {
            batch: b,
            phase: "dealer",
            bytes: 0,
            rounds: 0,
            seconds: r.dealer_time.as_secs_f64(),
        });
        for p in Phase::ALL {
            let c = r.phase_counters(p);
            rows.push(BenchRow {
                batch: b,
                phase: p.name(),
                bytes: c.bytes_sent,
                rounds: c.rounds,
                seconds: r.phase_time(p).as_secs_f64(),
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("batch,phase,bytes,rounds,seconds\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{:.6}", r.batch, r.phase, r.bytes, r.rounds, r.seconds);
    }
    s
}

#![allow(dead_code)]

use arp_core::{FixedConfig, RingTensor};
use arp_mpc::dealer::{Planner, Tape};
use arp_mpc::{Channel, Counters, Dealer, PartyId, Phase, ProtocolError, Session, ShareTensor};

/// Both parties' output shares and per-party traffic of one secure op.
pub struct Outcome {
    pub shares: [RingTensor; 2],
    pub scale: u32,
    pub counters: [[Counters; 5]; 2],
}

impl Outcome {
    pub fn arith(&self) -> RingTensor {
        self.shares[0].add(&self.shares[1])
    }

    pub fn binary(&self) -> RingTensor {
        self.shares[0].xor(&self.shares[1])
    }

    /// Counters summed over phases for party 0.
    pub fn total(&self) -> Counters {
        let mut t = Counters::default();
        for c in &self.counters[0] {
            t.bytes_sent += c.bytes_sent;
            t.bytes_received += c.bytes_received;
            t.rounds += c.rounds;
            t.words_sent += c.words_sent;
        }
        t
    }

    pub fn phase(&self, p: Phase) -> Counters {
        self.counters[0][p.index()]
    }
}

pub type PlanFn<'a> = &'a dyn Fn(&mut Session<Planner>, &[ShareTensor]) -> Result<ShareTensor, ProtocolError>;
pub type RunFn<'a> = &'a (dyn Fn(&mut Session<Tape>, &[ShareTensor]) -> Result<ShareTensor, ProtocolError> + Sync);

/// Plans the op on a dry session, deals, shares `inputs` (ring words and
/// scale) and runs both parties over an in-memory channel.
pub fn execute(cfg: FixedConfig, seed: u64, inputs: &[(RingTensor, u32)], plan: PlanFn, run: RunFn) -> Outcome {
    let bits = cfg.total_bits();
    let mut dry = Session::new(Channel::dry(PartyId::P0, bits), Planner::new(bits), cfg);
    let zeros: Vec<ShareTensor> = inputs
        .iter()
        .map(|(x, s)| ShareTensor {
            party: PartyId::P0,
            payload: RingTensor::zeros(x.shape(), bits),
            scale: *s,
        })
        .collect();
    plan(&mut dry, &zeros).unwrap();
    let requests = dry.into_parts().1.into_requests();
    let (t0, t1) = Dealer::new(cfg, seed).deal(&requests).unwrap();

    let mut client = Dealer::new(cfg, seed ^ 0x5eed);
    let mut parts: [Vec<ShareTensor>; 2] = [Vec::new(), Vec::new()];
    for (x, s) in inputs {
        let (a, b) = client.gen_shares(x);
        parts[0].push(ShareTensor { party: PartyId::P0, payload: a, scale: *s });
        parts[1].push(ShareTensor { party: PartyId::P1, payload: b, scale: *s });
    }
    online(cfg, t0, t1, parts, run)
}

/// Runs both parties on the given per-party input shares.
pub fn online(cfg: FixedConfig, t0: Tape, t1: Tape, parts: [Vec<ShareTensor>; 2], run: RunFn) -> Outcome {
    let bits = cfg.total_bits();
    let (c0, c1) = Channel::memory_pair(bits);
    let go = |chan: Channel, tape: Tape, xs: &[ShareTensor]| {
        let mut s = Session::new(chan, tape, cfg);
        let y = run(&mut s, xs).unwrap();
        let counters = Phase::ALL.map(|p| s.channel().counters(p));
        (y, counters)
    };
    let ((y0, k0), (y1, k1)) = std::thread::scope(|sc| {
        let h = sc.spawn(|| go(c1, t1, &parts[1]));
        (go(c0, t0, &parts[0]), h.join().unwrap())
    });
    assert_eq!(y0.scale, y1.scale);
    Outcome {
        shares: [y0.payload, y1.payload],
        scale: y0.scale,
        counters: [k0, k1],
    }
}

/// Runs the same body as planner and as online session.
#[macro_export]
macro_rules! secure {
    ($cfg:expr, $seed:expr, $inputs:expr, |$s:ident, $x:ident| $body:expr) => {{
        fn plan(
            $s: &mut arp_mpc::Session<arp_mpc::dealer::Planner>,
            $x: &[arp_mpc::ShareTensor],
        ) -> Result<arp_mpc::ShareTensor, arp_mpc::ProtocolError> {
            $body
        }
        fn run(
            $s: &mut arp_mpc::Session<arp_mpc::dealer::Tape>,
            $x: &[arp_mpc::ShareTensor],
        ) -> Result<arp_mpc::ShareTensor, arp_mpc::ProtocolError> {
            $body
        }
        common::execute($cfg, $seed, $inputs, &plan, &run)
    }};
}

pub fn words(cfg: &FixedConfig, shape: &[usize], values: &[f64]) -> RingTensor {
    let data = values.iter().map(|&v| cfg.encode_scalar(v).unwrap()).collect();
    RingTensor::new(shape, cfg.total_bits(), data).unwrap()
}

pub fn reals(cfg: &FixedConfig, r: &RingTensor) -> Vec<f64> {
    r.data().iter().map(|&w| cfg.decode_scalar(w)).collect()
}

mod common;

use arp_core::dapa::{ChannelPolys, PolyCoeffs};
use arp_core::{FixedConfig, ProductOp, RingTensor, Tensor};
use arp_mpc::{BinaryShareTensor, Counters, Phase};

fn ring(shape: &[usize], bits: u32) -> RingTensor {
    let n = shape.iter().product::<usize>() as u64;
    RingTensor::new(shape, bits, (0..n).map(|i| i * 7919).collect()).unwrap()
}

/// Length prefix plus one wire image per tensor.
fn frame(tensors: &[&RingTensor]) -> u64 {
    4 + tensors.iter().map(|t| t.wire_len() as u64).sum::<u64>()
}

#[test]
fn local_ops_cost_nothing() {
    let c = FixedConfig::default();
    let x = ring(&[2, 3, 4, 4], 64);
    let w = ring(&[5, 3, 3, 3], 64);
    let out = secure!(c, 1, &[(x.clone(), 16), (x.clone(), 16)], |s, v| {
        let y = s.add(&v[0], &v[1])?;
        let y = s.sub(&y, &v[1])?;
        let y = s.lin_combine(0.5, &y, &v[0])?;
        let y = s.avg_pool(&y, 2)?;
        let b = s.msb(&BinaryShareTensor { party: y.party, payload: y.payload.clone() });
        assert_eq!(b.payload.len(), y.len());
        Ok(s.rescale(y))
    });
    assert_eq!(out.total(), Counters::default());
    let out = common::execute(
        c,
        1,
        &[(x, 16)],
        &|s, v| s.mul_public(&v[0], &w, 16, ProductOp::Conv2d { stride: 1, padding: 1 }),
        &|s, v| s.mul_public(&v[0], &w, 16, ProductOp::Conv2d { stride: 1, padding: 1 }),
    );
    assert_eq!(out.total(), Counters::default());
}

#[test]
fn multiply_square_and_b2a_take_one_round() {
    let c = FixedConfig::default();
    let x = ring(&[6, 5], 64);
    let mul = secure!(c, 2, &[(x.clone(), 16), (x.clone(), 16)], |s, v| s.mul_beaver(&v[0], &v[1], arp_core::ProductOp::Elementwise));
    let sq = secure!(c, 2, &[(x.clone(), 16)], |s, v| s.square(&v[0]));
    let b2a = secure!(c, 2, &[(x.clone(), 0)], |s, v| s.b2a(&arp_mpc::BinaryShareTensor {
        party: v[0].party,
        payload: v[0].payload.map(|w| w & 1),
    }));
    for o in [&mul, &sq, &b2a] {
        assert_eq!(o.total().rounds, 1);
        assert_eq!(o.counters[0], o.counters[1]);
    }
    assert_eq!(mul.total().words_sent, 60);
    assert_eq!(sq.total().words_sent, 30);
    assert_eq!(2 * sq.total().words_sent, mul.total().words_sent);
    assert_eq!(mul.total().bytes_sent, frame(&[&x, &x]));
    assert_eq!(sq.total().bytes_sent, frame(&[&x]));
    assert_eq!(mul.total().bytes_received, mul.total().bytes_sent);
}

#[test]
fn a2b_rounds_follow_ring_width() {
    for (bits, rounds) in [(8u32, 4u64), (13, 5), (16, 5), (32, 6), (64, 7)] {
        let c = FixedConfig::new(bits, 4).unwrap();
        let x = ring(&[10], bits);
        let out = secure!(c, 3, &[(x, 4)], |s, v| {
            let b = s.a2b(&v[0])?;
            Ok(arp_mpc::ShareTensor { party: b.party, payload: b.payload, scale: 0 })
        });
        assert_eq!(out.total().rounds, rounds, "L = {bits}");
        // One AND in the first and last levels, two in between.
        let ands = 2 * (rounds - 1);
        assert_eq!(out.total().words_sent, 10 * 2 * ands, "L = {bits}");
    }
}

#[test]
fn relu_and_polynomial_phases() {
    let c = FixedConfig::default();
    let x = ring(&[4, 3], 64);
    let relu = secure!(c, 4, &[(x.clone(), 16)], |s, v| s.relu(&v[0]));
    assert_eq!(relu.phase(Phase::Comparison).rounds, 7 + 1 + 1);
    assert_eq!(relu.total().rounds, 9);

    let quad = ChannelPolys::uniform(3, PolyCoeffs::quadratic(0.3, 0.5, 0.1));
    let lin = ChannelPolys::uniform(3, PolyCoeffs::new(vec![0.3, 0.5]).unwrap());
    let q2 = quad.clone();
    let pq = common::execute(c, 4, &[(x.clone(), 16)], &|s, v| s.dapa_eval(&v[0], &q2), &|s, v| s.dapa_eval(&v[0], &quad));
    assert_eq!(pq.phase(Phase::Polynomial).rounds, 1);
    assert_eq!(pq.total().rounds, 1);
    let l2 = lin.clone();
    let pl = common::execute(c, 4, &[(x.clone(), 16)], &|s, v| s.dapa_eval(&v[0], &l2), &|s, v| s.dapa_eval(&v[0], &lin));
    assert_eq!(pl.total(), Counters::default());
}

#[test]
fn hybrid_costs_split_by_mask() {
    let c = FixedConfig::default();
    let x = ring(&[8, 4], 64);
    let polys = ChannelPolys::uniform(4, PolyCoeffs::quadratic(0.3, 0.5, 0.1));
    let run = |m: Vec<u8>| {
        let mask = Tensor::from_vec(&[4], m);
        let (p1, m1) = (polys.clone(), mask.clone());
        common::execute(c, 5, &[(x.clone(), 16)], &|s, v| s.hybrid_activation(&v[0], &m1, &p1), &|s, v| {
            s.hybrid_activation(&v[0], &mask, &polys)
        })
    };
    let all = run(vec![1, 1, 1, 1]);
    let half = run(vec![1, 0, 1, 0]);
    let none = run(vec![0, 0, 0, 0]);
    let cmp = |o: &common::Outcome| o.phase(Phase::Comparison).bytes_sent;
    assert!(cmp(&half) < cmp(&all));
    assert_eq!(cmp(&none), 0);
    assert_eq!(all.phase(Phase::Polynomial), Counters::default());
    assert_eq!(none.phase(Phase::Polynomial).rounds, 1);
    assert_eq!(half.phase(Phase::Comparison).rounds, 9);
    assert_eq!(half.phase(Phase::Polynomial).rounds, 1);
    assert_eq!(all.phase(Phase::Comparison).words_sent, 2 * half.phase(Phase::Comparison).words_sent);
}

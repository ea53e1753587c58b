//! Statistical checks of the channel delay and loss models.

use roundsim::network::{Channel, ChannelSettings, DelayDistribution, Packet};
use roundsim::rng::{stream_rng, Stream};
use roundsim::NodeId;
use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Poisson};

pub const SAMPLES: usize = 100_000;
pub const ALPHA: f64 = 0.01;

pub fn channel(delay: DelayDistribution, loss: f64, fifo: bool, seed: u64) -> Channel<u64> {
    let settings = ChannelSettings { delay, loss_probability: loss, fifo };
    Channel::new(NodeId(0), NodeId(1), &settings, stream_rng(seed, 0, Stream::Channel(NodeId(0), NodeId(1))))
}

/// Upper-tail p-value of Pearson's statistic; bins with small expectations are pooled forward.
pub fn chi_square_p(observed: &[u64], expected: &[f64]) -> f64 {
    let mut obs = Vec::new();
    let mut exp = Vec::new();
    let (mut o_acc, mut e_acc) = (0u64, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        o_acc += o;
        e_acc += e;
        if e_acc >= 5.0 {
            obs.push(o_acc);
            exp.push(e_acc);
            o_acc = 0;
            e_acc = 0.0;
        }
    }
    if let (Some(lo), Some(le)) = (obs.last_mut(), exp.last_mut()) {
        *lo += o_acc;
        *le += e_acc;
    }
    if obs.len() < 2 {
        return 1.0;
    }
    let stat: f64 = obs.iter().zip(&exp).map(|(&o, &e)| (o as f64 - e).powi(2) / e).sum();
    let df = (obs.len() - 1) as f64;
    1.0 - ChiSquared::new(df).unwrap().cdf(stat)
}

pub fn delays(dist: DelayDistribution, seed: u64) -> Vec<u64> {
    let mut ch = channel(dist, 0.0, false, seed);
    (0..SAMPLES).map(|i| ch.enqueue(i as u64, 0).unwrap().delay).collect()
}

fn mean(sample: &[u64]) -> f64 {
    sample.iter().sum::<u64>() as f64 / sample.len() as f64
}

pub fn deterministic_constant(value: u64, seed: u64) -> Result<(), String> {
    match delays(DelayDistribution::Deterministic { value }, seed).iter().find(|&&d| d != value) {
        Some(d) => Err(format!("deterministic {value} produced {d}")),
        None => Ok(()),
    }
}

pub fn uniform_fit(min: u64, max: u64, seed: u64) -> Result<f64, String> {
    let sample = delays(DelayDistribution::Uniform { min, max }, seed);
    let width = (max - min + 1) as usize;
    let mut counts = vec![0u64; width];
    for &d in &sample {
        if !(min..=max).contains(&d) {
            return Err(format!("uniform [{min}, {max}] produced {d}"));
        }
        counts[(d - min) as usize] += 1;
    }
    let p = chi_square_p(&counts, &vec![SAMPLES as f64 / width as f64; width]);
    let m = mean(&sample);
    let want = (min + max) as f64 / 2.0;
    if p <= ALPHA {
        return Err(format!("uniform [{min}, {max}] chi-square p = {p:.4}"));
    }
    if (m - want).abs() >= 0.05 {
        return Err(format!("uniform [{min}, {max}] mean {m}, expected {want}"));
    }
    Ok(p)
}

/// `1 + Poisson(mean - 1)` against the exact law.
pub fn poisson_fit(mean_delay: f64, seed: u64) -> Result<f64, String> {
    let sample = delays(DelayDistribution::poisson(mean_delay), seed);
    let max = *sample.iter().max().unwrap() as usize;
    let mut counts = vec![0u64; max + 1];
    for &d in &sample {
        if d < 1 {
            return Err("delay below one round".into());
        }
        counts[(d - 1) as usize] += 1;
    }
    let law = Poisson::new(mean_delay - 1.0).unwrap();
    let mut expected: Vec<f64> = (0..=max).map(|k| law.pmf(k as u64) * SAMPLES as f64).collect();
    // the last bin carries the whole upper tail
    let covered: f64 = expected.iter().sum();
    *expected.last_mut().unwrap() += SAMPLES as f64 - covered;
    let p = chi_square_p(&counts, &expected);
    let m = mean(&sample);
    if p <= ALPHA {
        return Err(format!("poisson({mean_delay}) chi-square p = {p:.4}"));
    }
    if (m - mean_delay).abs() >= 0.05 {
        return Err(format!("poisson({mean_delay}) sample mean {m}"));
    }
    Ok(p)
}

pub fn loss_frequency(loss: f64, seed: u64) -> Result<f64, String> {
    let mut ch = channel(DelayDistribution::Deterministic { value: 1 }, loss, true, seed);
    let lost = (0..SAMPLES).filter(|&i| ch.enqueue(i as u64, 0).is_none()).count();
    let freq = lost as f64 / SAMPLES as f64;
    if (freq - loss).abs() > 0.01 {
        return Err(format!("loss {loss}: observed {freq}"));
    }
    Ok(freq)
}

/// Enqueues `enqueues` numbered messages a few per round and checks they leave in order.
pub fn fifo_order(seed: u64, enqueues: usize, max_delay: u64, loss: f64) -> Result<(), String> {
    let mut ch = channel(DelayDistribution::Uniform { min: 1, max: max_delay }, loss, true, seed);
    let mut out: Vec<Packet<u64>> = Vec::new();
    let mut next_min = 0u64;
    let mut sent = 0u64;
    let mut round = 0u64;
    while sent < enqueues as u64 || !ch.is_empty() {
        if sent < enqueues as u64 {
            for _ in 0..(round % 3 + 1) {
                ch.enqueue(sent, round);
                sent += 1;
            }
        }
        out.clear();
        ch.take_deliverable(round, &mut out);
        for p in &out {
            if p.payload < next_min {
                return Err(format!("payload {} released after {}", p.payload, next_min - 1));
            }
            if p.delivery_round > round || p.delivery_round < p.send_round + p.delay {
                return Err(format!(
                    "payload {} released at round {round} with delivery round {}",
                    p.payload, p.delivery_round
                ));
            }
            next_min = p.payload + 1;
        }
        round += 1;
    }
    Ok(())
}

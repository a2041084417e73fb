//! Fast self-contained property suites behind the `selftest` CLI command:
//! one line of output per suite, non-zero exit when any fails.

use crate::compress::{
    decode_payload, encode_payload, sparsify_random, sparsify_threshold, sparsify_topk,
    update_residual, Codec, EmaThresholdState, ResidualBuffer, ResidualPolicy, ThresholdScope,
};
use crate::fedcore::StrategyKind;
use crate::halfcodec::{decode, encode, Half, RoundingMode};
use crate::harness::config::{DatasetKind, ExperimentConfig};
use crate::harness::experiment::run_experiment;
use crate::harness::metrics::{records_to_csv, robustness};
use crate::tensor::{axpy, l2_norm_sq, LayerLayout, ParamVector, SeededRng};
use rand::Rng;

type SuiteResult = Result<(), String>;
type Suite = fn() -> SuiteResult;

fn codec_round_trip() -> SuiteResult {
    let mut checked = 0u32;
    for bits in 0..=u16::MAX {
        if (bits >> 10) & 0x1F == 0x1F {
            continue;
        }
        let x = decode(Half::from_bits(bits));
        let back = encode(x, RoundingMode::NearestEven, None)
            .map_err(|e| e.to_string())?
            .to_bits();
        if back != bits {
            return Err(format!("code {bits:#06x} round-tripped to {back:#06x}"));
        }
        checked += 1;
    }
    if checked != 63_488 {
        return Err(format!("covered {checked} codes, expected 63488"));
    }
    Ok(())
}

fn stochastic_unbiasedness() -> SuiteResult {
    let mut rng = SeededRng::new(41, 0);
    for _ in 0..20 {
        let x: f32 = rng.random_range(-10.0f32..10.0);
        let n = 20_000;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for _ in 0..n {
            let v = decode(
                encode(x, RoundingMode::Stochastic, Some(&mut rng)).map_err(|e| e.to_string())?,
            ) as f64;
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        if (mean - x as f64).abs() > 4.0 * se + 1e-12 {
            return Err(format!("x={x}: mean {mean} off by more than 4 se ({se})"));
        }
    }
    Ok(())
}

fn payload_fuzz() -> SuiteResult {
    let mut rng = SeededRng::new(42, 0);
    let layout = LayerLayout::new(vec![("a", 64), ("b", 32)]).map_err(|e| e.to_string())?;
    for trial in 0..1000 {
        let values: Vec<f32> = (0..96).map(|_| rng.random_range(-50.0f32..50.0)).collect();
        let c = ParamVector::from_values(&layout, values).map_err(|e| e.to_string())?;
        let fraction = rng.random_range(0.05f64..1.0);
        let support = sparsify_random(&c, fraction, &mut rng).map_err(|e| e.to_string())?;
        let out = crate::compress::compress(
            &c,
            &support,
            Codec::Binary16(RoundingMode::NearestEven),
            None,
            trial,
            trial % 7,
        )
        .map_err(|e| e.to_string())?;
        let bytes = encode_payload(&out.payload);
        let back = decode_payload(&bytes).map_err(|e| e.to_string())?;
        if back != out.payload {
            return Err(format!("trial {trial}: payload mismatch after round trip"));
        }
        if out.payload.body_bytes() != 6 * support.total_kept() as u64 {
            return Err(format!("trial {trial}: body bytes off the 6-per-entry rule"));
        }
    }
    Ok(())
}

fn contraction_and_floor() -> SuiteResult {
    let mut rng = SeededRng::new(43, 0);
    let layout = LayerLayout::new(vec![("a", 48), ("b", 16)]).map_err(|e| e.to_string())?;
    for _ in 0..1000 {
        let values: Vec<f32> = (0..64).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let c = ParamVector::from_values(&layout, values).map_err(|e| e.to_string())?;
        let mut state = EmaThresholdState::new(&layout, 0.9, ThresholdScope::PerLayer)
            .map_err(|e| e.to_string())?;
        state.set_all(rng.random_range(0.0f64..3.0));
        let supports = [
            sparsify_threshold(&c, &state).0,
            sparsify_topk(&c, 0.2).map_err(|e| e.to_string())?,
            sparsify_random(&c, 0.2, &mut rng).map_err(|e| e.to_string())?,
        ];
        for support in supports {
            if support.total_kept() == 0 {
                return Err("empty support violates the keep floor".into());
            }
            let mut masked = ParamVector::zeros(&layout);
            for li in 0..2 {
                let off = layout.segment(li).offset;
                for &i in support.layer(li) {
                    masked.values_mut()[off + i as usize] = c.values()[off + i as usize];
                }
            }
            let err = axpy(-1.0, &masked, &c).map_err(|e| e.to_string())?;
            if l2_norm_sq(&err) > l2_norm_sq(&c) {
                return Err("masking expanded the vector norm".into());
            }
        }
    }
    Ok(())
}

fn error_feedback_telescoping() -> SuiteResult {
    let layout = LayerLayout::new(vec![("a", 48), ("b", 16)]).map_err(|e| e.to_string())?;
    let mut rng = SeededRng::new(44, 0);
    let mut state =
        EmaThresholdState::new(&layout, 0.9, ThresholdScope::PerLayer).map_err(|e| e.to_string())?;
    let mut residual = ResidualBuffer::zeros(&layout);
    let mut sum_sent = vec![0.0f64; 64];
    let mut sum_delta = vec![0.0f64; 64];
    for round in 0..50u32 {
        let values: Vec<f32> = (0..64)
            .map(|_| rng.random_range(-0.1f32..0.1))
            .collect();
        let delta = ParamVector::from_values(&layout, values).map_err(|e| e.to_string())?;
        for (acc, &d) in sum_delta.iter_mut().zip(delta.values()) {
            *acc += d as f64;
        }
        let c = axpy(1.0, residual.vector(), &delta).map_err(|e| e.to_string())?;
        state = crate::compress::update_threshold(&state, &c).map_err(|e| e.to_string())?;
        let (support, _) = sparsify_threshold(&c, &state);
        let out = crate::compress::compress(
            &c,
            &support,
            Codec::Binary16(RoundingMode::NearestEven),
            None,
            round,
            0,
        )
        .map_err(|e| e.to_string())?;
        for (acc, &u) in sum_sent.iter_mut().zip(out.reconstruction.values()) {
            *acc += u as f64;
        }
        residual = update_residual(&c, &out.reconstruction, &support, ResidualPolicy::FullEf)
            .map_err(|e| e.to_string())?;
    }
    let mut err_sq = 0.0f64;
    let mut ref_sq = 0.0f64;
    for i in 0..64 {
        let want = sum_delta[i] - residual.vector().values()[i] as f64;
        err_sq += (sum_sent[i] - want) * (sum_sent[i] - want);
        ref_sq += sum_delta[i] * sum_delta[i];
    }
    if err_sq.sqrt() > 1e-4 * ref_sq.sqrt() {
        return Err(format!(
            "telescoping error {} exceeds 1e-4 of {}",
            err_sq.sqrt(),
            ref_sq.sqrt()
        ));
    }
    Ok(())
}

fn topk_counts() -> SuiteResult {
    let layout = LayerLayout::new(vec![("a", 101)]).map_err(|e| e.to_string())?;
    let mut rng = SeededRng::new(45, 0);
    let values: Vec<f32> = (0..101).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let c = ParamVector::from_values(&layout, values).map_err(|e| e.to_string())?;
    for k in 1..=10 {
        let fraction = k as f64 / 10.0;
        let s = sparsify_topk(&c, fraction).map_err(|e| e.to_string())?;
        let want = (fraction * 101.0).ceil() as usize;
        if s.layer(0).len() != want {
            return Err(format!(
                "fraction {fraction}: kept {} expected {want}",
                s.layer(0).len()
            ));
        }
    }
    Ok(())
}

fn experiment_determinism() -> SuiteResult {
    let cfg = ExperimentConfig {
        dataset: DatasetKind::Synthetic,
        rounds: 3,
        clients: 3,
        hidden_dim: 8,
        lr: 0.2,
        batch_size: 32,
        seed: 17,
        ..ExperimentConfig::default()
    };
    let a = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let b = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let csv_a = records_to_csv(&a.records, a.diverged_at);
    let csv_b = records_to_csv(&b.records, b.diverged_at);
    if csv_a != csv_b {
        return Err("identical config produced different record streams".into());
    }
    Ok(())
}

fn robustness_spot_values() -> SuiteResult {
    let (r1, r2) = robustness(87.26, 0.39);
    if (r1 - 86.87).abs() > 1e-9 || (r2 - 223.74).abs() > 0.01 {
        return Err(format!("87.26/0.39 gave {r1}/{r2}"));
    }
    let (r1, r2) = robustness(54.46, 3.09);
    if (r1 - 51.37).abs() > 1e-9 || (r2 - 17.62).abs() > 0.01 {
        return Err(format!("54.46/3.09 gave {r1}/{r2}"));
    }
    Ok(())
}

fn strategy_byte_rules() -> SuiteResult {
    for (kind, per_coord) in [(StrategyKind::FedAvg, 4u64), (StrategyKind::QuantOnly, 2)] {
        let cfg = ExperimentConfig {
            dataset: DatasetKind::Synthetic,
            strategy: kind,
            rounds: 1,
            clients: 2,
            hidden_dim: 8,
            seed: 23,
            ..ExperimentConfig::default()
        };
        let run = run_experiment(&cfg).map_err(|e| e.to_string())?;
        let want = per_coord * run.model_dim as u64 * 2;
        if run.records[0].paper_bytes != want {
            return Err(format!(
                "{kind:?}: paper bytes {} expected {want}",
                run.records[0].paper_bytes
            ));
        }
    }
    Ok(())
}

/// Run every suite, printing one status line each. Returns how many failed.
pub fn run_all() -> usize {
    let suites: [(&str, Suite); 9] = [
        ("codec-round-trip", codec_round_trip),
        ("codec-stochastic-unbiasedness", stochastic_unbiasedness),
        ("payload-fuzz", payload_fuzz),
        ("sparsifier-contraction-floor", contraction_and_floor),
        ("error-feedback-telescoping", error_feedback_telescoping),
        ("topk-count-exactness", topk_counts),
        ("experiment-determinism", experiment_determinism),
        ("robustness-spot-values", robustness_spot_values),
        ("strategy-byte-rules", strategy_byte_rules),
    ];

    let mut failures = 0;
    for (name, suite) in suites {
        match suite() {
            Ok(()) => println!("[PASS] {name}"),
            Err(reason) => {
                failures += 1;
                println!("[FAIL] {name}: {reason}");
            }
        }
    }
    failures
}

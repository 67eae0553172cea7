use proptest::prelude::*;
use rio_core::executor::{simulate, starved_ticks, ExecutorConfig};
use rio_core::teleop::{interpolate, LowPass};
use rio_core::Timestamp;

fn waypoints() -> impl Strategy<Value = Vec<(Timestamp, Vec<f64>)>> {
    prop::collection::vec((1u64..1000, prop::collection::vec(-10.0f64..10.0, 2)), 1..10).prop_map(|v| {
        let mut t = 0;
        v.into_iter()
            .map(|(gap, x)| {
                t += gap;
                (Timestamp(t), x)
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn lowpass_stays_in_convex_hull(
        alpha in 0.001f64..=1.0,
        xs in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 3), 1..50),
    ) {
        let mut f = LowPass::new(alpha).unwrap();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for x in &xs {
            for i in 0..3 {
                lo[i] = lo[i].min(x[i]);
                hi[i] = hi[i].max(x[i]);
            }
            let y = f.apply(x).unwrap();
            for i in 0..3 {
                prop_assert!(y[i] >= lo[i] - 1e-9 && y[i] <= hi[i] + 1e-9);
            }
        }
    }

    #[test]
    fn interpolation_hits_waypoints_exactly(w in waypoints()) {
        for (t, x) in &w {
            prop_assert_eq!(&interpolate(&w, *t).unwrap(), x);
        }
    }

    #[test]
    fn interpolation_is_continuous(w in waypoints(), pick in any::<prop::sample::Index>()) {
        // one nanosecond step moves the output by at most the steepest slope
        let (t0, t1) = (w[0].0 .0, w[w.len() - 1].0 .0);
        let t = t0 + pick.index((t1 - t0 + 1) as usize) as u64;
        let a = interpolate(&w, Timestamp(t)).unwrap();
        let b = interpolate(&w, Timestamp(t + 1)).unwrap();
        let max_jump = w.windows(2).map(|p| {
            let dt = (p[1].0 .0 - p[0].0 .0) as f64;
            p[0].1.iter().zip(&p[1].1).map(|(u, v)| (u - v).abs() / dt).fold(0.0, f64::max)
        }).fold(0.0, f64::max);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= max_jump + 1e-9);
        }
    }

    #[test]
    fn chunk_ids_monotone_and_no_starvation_with_lead(
        horizon in 4usize..32,
        trigger in 0.1f64..0.9,
        rate in 5.0f64..60.0,
        lat_ms in 1u64..200,
        immediate in any::<bool>(),
    ) {
        let mut cfg = ExecutorConfig::new(rate, horizon, trigger);
        prop_assume!(cfg.validate().is_ok());
        if immediate {
            cfg.dispatch = rio_core::executor::Dispatch::Immediate;
        }
        let trace = simulate(cfg.clone(), 1000, lat_ms * 1_000_000, |_, _| vec![vec![0.0]; horizon]).unwrap();
        let ids: Vec<u64> = trace.iter().filter_map(|r| r.chunk_id).collect();
        prop_assert!(ids.windows(2).all(|w| w[0] <= w[1]));
        // ticks left after the trigger fires, times the period, must cover the latency
        let lead_ns = (horizon - cfg.trigger_step()) as u64 * cfg.period_ns();
        if lead_ns > lat_ms * 1_000_000 {
            prop_assert_eq!(starved_ticks(&trace), 0);
        }
    }
}

//! Synthetic round-trip lists and their frozen latency statistic.

pub fn lists() -> Vec<(&'static str, Vec<f64>)> {
    let r = |n: usize, f: &dyn Fn(usize) -> f64| (0..n).map(f).collect::<Vec<f64>>();
    let mut spikes = r(1000, &|i| 0.8 + i as f64 * 0.001);
    spikes.extend([50.0; 5]);
    vec![
        ("constant_2ms", vec![2.0; 1000]),
        ("one_to_hundred", r(100, &|i| (i + 1) as f64)),
        ("modular_501", r(500, &|i| (i * 37 % 101) as f64 + 0.5)),
        ("quadratic_mod", r(1000, &|i| (i * i % 997) as f64 / 10.0)),
        ("mixed_steps", r(250, &|i| 1.0 + (i % 7) as f64 * 0.125 + (i % 13) as f64 * 0.0625)),
        ("spikes", spikes),
        ("descending", r(300, &|i| (300 - i) as f64 * 0.01)),
        ("squares", r(101, &|i| (i * i) as f64 * 0.001)),
        ("prime_stride", r(777, &|i| ((i * 7919) % 1000) as f64 / 250.0)),
        ("bimodal", r(1000, &|i| if i % 3 != 0 { 0.4 + (i % 10) as f64 * 0.01 } else { 1.9 + (i % 10) as f64 * 0.01 })),
    ]
}

/// Kept count and latency from numpy: sort, drop samples outside
/// `[percentile(1), percentile(99)]`, half of `np.median`.
pub const ORACLE: [(&str, usize, f64); 10] = [
    ("constant_2ms", 1000, 1.0),
    ("one_to_hundred", 98, 25.25),
    ("modular_501", 490, 25.25),
    ("quadratic_mod", 980, 24.775),
    ("mixed_steps", 245, 0.875),
    ("spikes", 983, 0.651),
    ("descending", 294, 0.7525),
    ("squares", 99, 1.25),
    ("prime_stride", 761, 0.996),
    ("bimodal", 1000, 0.23500000000000001),
];

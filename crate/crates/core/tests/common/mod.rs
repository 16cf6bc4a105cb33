//! Shared fixture builders for the integration and acceptance suites.

use audit_core::biaslab::{BiasKind, BiasSpec, SynthWorldSpec};
use audit_core::config::AuditConfig;

/// Bench configuration for one failure mode at the stated protocol scale:
/// test 300 with 20% underperforming samples, K=5, gamma=10.
///
/// Spurious-correlation and rare-slice worlds use the default geometry
/// (separation 3.0, base error 0.05, group error 0.6). The noisy-label
/// world is deliberately harder (separation 1.5, group error 0.5), the
/// regime where discovery is not saturated and raising the
/// underperforming share visibly helps.
pub fn bench_fixture(kind: BiasKind, iterations: usize, base_seed: u64) -> AuditConfig {
    let world = match kind {
        BiasKind::NoisyLabel => SynthWorldSpec {
            cluster_separation: 1.5,
            group_error: 0.5,
            ..SynthWorldSpec::default()
        },
        _ => SynthWorldSpec::default(),
    };
    let bias = BiasSpec {
        kind,
        strength: match kind {
            BiasKind::SpuriousCorrelation => 0.7,
            BiasKind::RareSlice => 0.02,
            BiasKind::NoisyLabel => 0.3,
        },
        train_size: 1000,
        test_size: 300,
        test_underperforming_fraction: 0.2,
        ..BiasSpec::default()
    };
    AuditConfig {
        iterations,
        base_seed,
        world,
        bias,
        ..AuditConfig::default()
    }
}

/// The marker token the bench fixtures plant ("attr0").
#[allow(dead_code)]
pub fn marker(config: &AuditConfig) -> &str {
    &config.world.marker_tokens[&config.bias.attr]
}

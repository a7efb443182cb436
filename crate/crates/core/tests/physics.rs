use mesic::lagrangian::{variational_residual, ActionSetup, Variation};
use mesic::simulate::{builtin, run, time_reversal_probe, RunOptions};
use mesic::Error;

#[test]
fn leapfrog_retraces_its_steps() {
    let mut sc = builtin("free-field-1d").unwrap();
    sc.duration = 400.0 * sc.dt;
    let back = time_reversal_probe(&sc, 400).unwrap();
    assert!(back < 1e-11, "{back}");
}

#[test]
fn oracle_refuses_fixed_endpoints() {
    let mut sc = builtin("coupled-1d").unwrap();
    sc.duration = 8.0 * sc.dt;
    let rec = run(&sc, RunOptions { keep_history: true, sem: false }).unwrap();
    let setup = ActionSetup {
        grid: sc.grid.clone(),
        metric: sc.metric().unwrap(),
        eta: sc.eta().unwrap(),
        kernel: sc.kernel,
        mass: sc.physics.field_mass,
        suspension: sc.suspension(),
    };
    let wl = rec.worldline.as_ref();
    for var in [
        Variation::FieldNode { level: 0, node: 3 },
        Variation::FieldNode { level: 8, node: 3 },
        Variation::ParticleNode { level: 0, axis: 0 },
        Variation::ParticleNode { level: 4, axis: 1 },
    ] {
        let r = variational_residual(&setup, &rec.fields, wl, var, 1.0);
        assert!(matches!(r, Err(Error::Index(_))), "{var:?}");
    }
    let r = variational_residual(&setup, &rec.fields, wl, Variation::ParticleNode { level: 4, axis: 0 }, 0.1).unwrap();
    assert!(r.relative() < 1e-6);
}

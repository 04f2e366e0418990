mod common;

use common::*;
use fsicloud::constitutive::Potential;
use fsicloud::error::Error;
use fsicloud::harness::{build_scenario, build_scenario_with_radii, run_study, run_study_in, InitialVelocity, StudyPlan};
use fsicloud::output::{read_energy_csv, read_snapshot, read_study_csv};

#[test]
fn each_violated_hypothesis_is_named() {
    for (name, plan, radii) in hypothesis_violations() {
        match build_scenario_with_radii(&plan, &radii) {
            Err(Error::Hypothesis { name: got, detail }) => {
                assert_eq!(got, name, "{detail}");
                assert!(Error::Hypothesis { name: got, detail }.to_string().contains(&format!("({name})")));
            }
            other => panic!("{name}: expected a hypothesis error, got {:?}", other.map(|_| ())),
        }
    }
}

#[test]
fn valid_radii_pass_every_check() {
    let plan = StudyPlan::new(unit_grid(64), vec![1, 2]);
    let s = build_scenario_with_radii(&plan, &[0.08, 0.1]).unwrap();
    assert_eq!(s.cloud.len(), 2);
}

#[test]
fn shape_check_is_skipped_above_the_dimension() {
    let mut plan = StudyPlan::new(unit_grid(64), vec![1]);
    plan.shape_lambda = 4.0;
    plan.potential = Potential::power_law(1e-3, 2e-5, 3.0).unwrap();
    assert!(build_scenario_with_radii(&plan, &[0.1]).is_ok());
}

#[test]
fn unresolvable_radius_reports_the_feasible_cap() {
    let plan = StudyPlan::new(unit_grid(64), vec![1, 2]);
    let cap = plan.max_feasible_n();
    match build_scenario(&plan, cap + 1) {
        Err(Error::UnresolvableRadius { max_feasible, .. }) => assert_eq!(max_feasible, cap),
        other => panic!("expected UnresolvableRadius, got {:?}", other.map(|_| ())),
    }
    assert!(build_scenario(&plan, cap).is_ok());
}

fn small_plan() -> StudyPlan {
    let mut plan = StudyPlan::new(unit_grid(48), vec![1, 2, 4]);
    plan.t_end = 0.04;
    plan.dt = 4e-3;
    plan.u0 = InitialVelocity::Vortex { amplitude: 0.5 };
    plan.snapshot_every = 5;
    plan
}

#[test]
fn small_study_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan();
    let res = run_study_in(&plan, Some(dir.path())).unwrap();
    assert_eq!(res.rows.len(), 3);
    for row in &res.rows {
        let m = row.outcome.as_ref().unwrap();
        assert_eq!(m.steps, 10);
        assert!(m.err_l2 > 0.0 && m.err_grad_lp > 0.0);
        assert!(m.energy_drift <= 1e-9, "{m:?}");
    }
    let csv = read_study_csv(&dir.path().join("study.csv")).unwrap();
    assert_eq!(csv.iter().map(|r| r.n).collect::<Vec<_>>(), vec![1, 2, 4]);
    assert_eq!(read_energy_csv(&dir.path().join("reference/energy.csv")).unwrap().len(), 11);
    for n in [1, 2, 4] {
        let run = dir.path().join(format!("run_N{n:03}"));
        assert_eq!(read_energy_csv(&run.join("energy.csv")).unwrap().len(), 11);
        let rho = read_snapshot(&run.join("snapshots/rho_000010.txt")).unwrap();
        assert_eq!(rho.grid.nx(), 48);
        assert!(rho.data.iter().any(|&v| v > 1.0));
    }
}

#[test]
fn study_results_do_not_depend_on_output() {
    let plan = small_plan();
    let a = run_study(&plan).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let b = run_study_in(&plan, Some(dir.path())).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_bodies_reproduce_the_reference_exactly() {
    let mut plan = small_plan();
    plan.n_list = vec![0];
    let res = run_study(&plan).unwrap();
    let m = res.row(0).unwrap().outcome.as_ref().unwrap();
    assert_eq!(m.err_l2, 0.0);
    assert_eq!(m.err_grad_lp, 0.0);
}

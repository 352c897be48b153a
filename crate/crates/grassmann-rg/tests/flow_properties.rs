//! Randomized properties of the full flow on the four-band desk lattice.

use grassmann_rg::lattice_index::LatticeSpec;
use grassmann_rg::model::{CouplingParams, HoppingParams};
use grassmann_rg::rgflow::{telescoping_run, FlowConfig, FlowSetup};
use proptest::prelude::*;

fn desk_setup() -> FlowSetup {
    let spec = LatticeSpec::new(2, 1, 4, 1.0, 4.0).unwrap();
    FlowSetup::four_band(&spec, &HoppingParams::uniform(1.0), &FlowConfig::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn small_couplings_telescope_and_keep_the_symmetry_class(
        couplings in proptest::collection::vec(-2e-3f64..2e-3, 4)
    ) {
        let setup = desk_setup();
        let report = telescoping_run(&setup, &CouplingParams::real(&couplings)).unwrap();
        prop_assert!(report.residual < 1e-10, "telescoping residual {}", report.residual);
        for record in &report.ir.records {
            // The momentum route stores one spin block; the real-space route covers both.
            let gap = (2.0 * record.log_det_re - record.log_det_real_space_re)
                .hypot(2.0 * record.log_det_im - record.log_det_real_space_im);
            prop_assert!(gap < 1e-12, "scale {}: determinant routes differ by {gap}", record.l);
        }
        prop_assert!(report.input_class.iter().all(|row| row.residual < 1e-10));
        prop_assert!(report.ir.invariance.iter().all(|row| row.residual < 1e-9));
        prop_assert!(report.ir.j_end_im.abs() < 1e-12);
    }
}

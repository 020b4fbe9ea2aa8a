//! Sweeps one organ's suppression control on the default phantom.
//!
//! Usage: `steering_sweep [Rectum|Bladder]`

use arcplan_core::phantom::{BLADDER, PTV, RECTUM};
use arcplan_core::{evaluate_dose, generate_phantom, prepare_case, replan, PhantomSpec, PlanningConfig};

fn main() {
    let organ = std::env::args().nth(1).unwrap_or_else(|| RECTUM.to_string());
    let phantom = generate_phantom::<f64>(&PhantomSpec::default()).unwrap();
    let case = prepare_case(&PlanningConfig::default(), phantom).unwrap();
    println!("{:<6} {:>12} {:>12} {:>12} {:>12}", "s", "PTV HI", "mean", "deliv. HI", "deliv. mean");
    for s in [0.0, 0.01, 0.02, 0.04] {
        let mut request = case.default_request();
        for o in [RECTUM, BLADDER] {
            request.objective.oar_controls.insert(o.into(), 0.0);
        }
        request.objective.oar_controls.insert(organ.clone(), s);
        let out = replan(&case, &request).unwrap();
        let planned = evaluate_dose(&out.result.dose, &case.phantom.structures).unwrap();
        println!(
            "{s:<6} {:>12.5} {:>12.4} {:>12.5} {:>12.4}",
            planned.structures[PTV].hi.unwrap(),
            planned.structures[organ.as_str()].dmean,
            out.metrics.structures[PTV].hi.unwrap(),
            out.metrics.structures[organ.as_str()].dmean
        );
    }
}

//! Plans the default phantom and prints timings and the delivered metrics.
//!
//! Usage: `default_plan [s_rectum [s_bladder]]`

use arcplan_core::phantom::{BLADDER, RECTUM};
use arcplan_core::{evaluate_dose, generate_phantom, prepare_case, replan, PhantomSpec, PlanningConfig};

fn main() {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let phantom = generate_phantom::<f64>(&PhantomSpec::default()).unwrap();
    let case = prepare_case(&PlanningConfig::default(), phantom).unwrap();
    print!("prepare\n{}", case.timings.table());

    let mut request = case.default_request();
    request.objective.oar_controls.insert(RECTUM.into(), args.first().copied().unwrap_or(0.0));
    request.objective.oar_controls.insert(BLADDER.into(), args.get(1).copied().unwrap_or(0.0));
    let out = replan(&case, &request).unwrap();
    print!("\nreplan\n{}", out.timings.table());

    let optimized = evaluate_dose(&out.result.dose, &case.phantom.structures).unwrap();
    println!();
    for (label, report) in [("optimized", &optimized), ("delivered", &out.metrics)] {
        for (name, m) in &report.structures {
            println!(
                "{label:<10} {name:<8} D2 {:7.3} D50 {:7.3} D98 {:7.3} mean {:7.3} HI {}",
                m.d2,
                m.d50,
                m.d98,
                m.dmean,
                m.hi.map_or("-".into(), |h| format!("{h:.4}"))
            );
        }
    }
}

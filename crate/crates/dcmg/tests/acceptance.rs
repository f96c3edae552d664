mod common;

use std::process::ExitCode;

use dcmg::{parse_scenario, verify, Status};

fn main() -> ExitCode {
    let ld = parse_scenario(common::shipped()).expect("shipped scenario parses");
    let report = verify(&ld).expect("reference run completes");
    println!("acceptance: {}", ld.name);
    for c in &report.criteria {
        println!("{c}");
        if c.status != Status::Pass {
            for d in &c.details {
                println!("      {d}");
            }
        }
    }
    let passed = report.criteria.iter().filter(|c| c.status == Status::Pass).count();
    println!("acceptance: {passed} of {} criteria pass", report.criteria.len());
    if report.criteria.len() == 9 && passed == 9 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

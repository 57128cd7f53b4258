use std::path::PathBuf;

use qspace::cli::{self, AnalysisReport, EXIT_INPUT, EXIT_OK, EXIT_VERIFY};
use qspace::synthesis::{Circuit, Step};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("qspace-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn call(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = cli::main_with(std::iter::once("qspace").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

#[test]
fn analyze_builtins() {
    for (name, qubits, t_star) in [("five_one_three", 4, 1), ("steane", 4, 3), ("shor", 3, 6)] {
        let (code, out, _) = call(&["analyze", "--builtin", name]);
        assert_eq!(code, EXIT_OK);
        let report: AnalysisReport = serde_json::from_str(&out).unwrap();
        assert_eq!(report.optimal_qubits, qubits);
        assert_eq!(report.t_star, t_star);
        assert_eq!(report.optimal_qubits, report.n - report.t_star);
        assert_eq!(report.chain.factorized_qubits, report.ordering.qubits);
        let again = serde_json::to_string(&report).unwrap();
        let back: AnalysisReport = serde_json::from_str(&again).unwrap();
        assert_eq!(back, report);
    }
}

#[test]
fn analyze_writes_output_file() {
    let path = scratch("report.json");
    let (code, _, _) = call(&["analyze", "--builtin", "five_one_three", "--output", path.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let report: AnalysisReport = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(report.name, "[[5,1,3]]");
}

#[test]
fn trivial_code_has_no_delay() {
    let path = scratch("nk0.json");
    std::fs::write(&path, r#"{"name":"pair","n":2,"k":0,"generators":["XX","ZZ"]}"#).unwrap();
    let (code, out, _) = call(&["analyze", "--code", path.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let report: AnalysisReport = serde_json::from_str(&out).unwrap();
    assert_eq!((report.t_star, report.optimal_qubits), (0, 2));
}

#[test]
fn input_errors_exit_four() {
    let (code, _, err) = call(&["analyze", "--builtin", "toric"]);
    assert_eq!(code, EXIT_INPUT);
    assert!(err.contains("toric"));
    let path = scratch("anti.json");
    std::fs::write(&path, r#"{"n":1,"k":0,"generators":["X","Z"]}"#).unwrap();
    let (code, _, err) = call(&["analyze", "--code", path.to_str().unwrap()]);
    assert_eq!(code, EXIT_INPUT);
    assert!(err.contains("anticommute"));
    let (code, _, _) = call(&["analyze"]);
    assert_eq!(code, EXIT_INPUT);
    let (code, _, _) = call(&["verify", "--builtin", "shor", "--circuit", "/nonexistent/c.json", "--tol", "1e-8"]);
    assert_eq!(code, EXIT_INPUT);
}

#[test]
fn synthesize_then_verify_and_detect_perturbation() {
    let path = scratch("c513.json");
    let p = path.to_str().unwrap();
    let (code, _, _) = call(&["synthesize", "--builtin", "five_one_three", "--out-circuit", p]);
    assert_eq!(code, EXIT_OK);
    let text = std::fs::read_to_string(&path).unwrap();
    let circuit = Circuit::from_json(&text).unwrap();
    assert_eq!(circuit.to_json(), text);
    assert_eq!(circuit.m, 4);

    let (code, out, _) = call(&["verify", "--builtin", "five_one_three", "--circuit", p, "--tol", "1e-8"]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.contains("PASS"));

    let mut bad = circuit.clone();
    let step = bad.steps.iter_mut().find_map(|s| match s {
        Step::Unitary { table } => table.values_mut().next(),
        _ => None,
    });
    let u = step.unwrap();
    u[(0, 0)].re += 1e-3;
    let bad_path = scratch("c513_bad.json");
    std::fs::write(&bad_path, bad.to_json()).unwrap();
    let (code, out, _) =
        call(&["verify", "--builtin", "five_one_three", "--circuit", bad_path.to_str().unwrap(), "--tol", "1e-8"]);
    assert_eq!(code, EXIT_VERIFY);
    assert!(out.contains("FAIL"));
}

#[test]
fn base_case_circuit_verifies() {
    // One generator on two qubits gives T* = 0 and a single-level circuit.
    let code_path = scratch("zz.json");
    std::fs::write(&code_path, r#"{"name":"zz","n":2,"k":1,"generators":["ZZ"]}"#).unwrap();
    let circ = scratch("zz_circuit.json");
    let c = code_path.to_str().unwrap();
    let (code, _, _) = call(&["synthesize", "--code", c, "--out-circuit", circ.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let (code, out, _) = call(&["verify", "--code", c, "--circuit", circ.to_str().unwrap(), "--tol", "1e-8"]);
    assert_eq!(code, EXIT_OK, "{out}");
    let circuit = Circuit::from_json(&std::fs::read_to_string(&circ).unwrap()).unwrap();
    assert_eq!((circuit.m, circuit.n_loads()), (2, 0));
}

#[test]
fn table1_text_and_json() {
    let (code, out, _) = call(&["table1"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.lines().count() == 4, "{out}");
    let (code, out, _) = call(&["table1", "--json"]);
    assert_eq!(code, EXIT_OK);
    let reports: Vec<AnalysisReport> = serde_json::from_str(&out).unwrap();
    let widths: Vec<usize> = reports.iter().map(|r| r.optimal_qubits).collect();
    assert_eq!(widths, [4, 4, 3]);
}

#[test]
fn tolerance_flag_and_environment() {
    assert_eq!(cli::tolerance(Some(1e-6)).unwrap(), 1e-6);
    std::env::set_var("QSPACE_TOL", "1e-3");
    assert_eq!(cli::tolerance(None).unwrap(), 1e-3);
    std::env::remove_var("QSPACE_TOL");
    assert_eq!(cli::tolerance(None).unwrap(), cli::DEFAULT_TOL);
}

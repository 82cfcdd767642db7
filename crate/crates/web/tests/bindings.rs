use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).expect("valid JSON")
}

#[test]
fn lists_scalar_problems() {
    let v = parse(hympc_web::problems());
    let names: Vec<&str> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["name"].as_str().unwrap())
        .collect();
    assert!(names.contains(&"tutorial21"));
    assert!(!names.contains(&"friction_mpc"));
}

#[test]
fn solve_matches_reference() {
    let v = parse(hympc_web::solve("tutorial21", -0.5, vec![]));
    assert!((v["w"][0].as_f64().unwrap() - 0.125).abs() < 1e-8, "{v}");
    assert_eq!(v["class"], "S");
    let v = parse(hympc_web::solve("jump2d", 0.0, vec![1.0, 0.0]));
    assert!((v["w"][0].as_f64().unwrap() - 1.0).abs() < 1e-8, "{v}");
}

#[test]
fn errors_come_back_as_json() {
    let v = parse(hympc_web::solve("nope", 0.0, vec![]));
    assert!(v["error"].as_str().unwrap().contains("unknown"));
    let v = parse(hympc_web::path("tutorial21", 0.0, 1.0, 0.0, 1));
    assert!(v["error"].is_string());
    let v = parse(hympc_web::path("tutorial21", 0.0, 1e6, 1e-3, 1));
    assert!(v["error"].is_string());
    let v = parse(hympc_web::mpc("warp", 2.0, 1.0, 0.0));
    assert!(v["error"].is_string());
}

#[test]
fn path_shows_the_jump() {
    let v = parse(hympc_web::path("tutorial21", -0.75, 0.75, 0.05, 1));
    assert!(v.get("error").is_none(), "{v}");
    assert_eq!(v["x"].as_array().unwrap().len(), 31);
    assert_eq!(v["jumps"].as_array().unwrap().len(), 1);
    let v = parse(hympc_web::path("pulsc2d", -2.0, 2.0, 0.1, 3));
    assert_eq!(v["kinks"].as_array().unwrap().len(), 2);
}

#[test]
fn closed_loop_switches() {
    let v = parse(hympc_web::mpc("hyrti", 3.0, 1.0, 1.5));
    assert!(v.get("error").is_none(), "{v}");
    assert_eq!(v["t"].as_array().unwrap().len(), 30);
    assert!(v["branch_changes"].as_u64().unwrap() > 0);
    assert!(v["stopped"].is_null());
}

use eventscore_web::Demo;

#[test]
fn demo_fits_and_reports() {
    let d = Demo::build(160, 3, 1.0).unwrap();

    let summary: serde_json::Value = serde_json::from_str(&d.summary_json()).unwrap();
    let lambdas = summary["lambdas"].as_array().unwrap();
    assert_eq!(lambdas.len(), 20);
    assert_eq!(summary["support"][0], 0);
    assert!(summary["chosen"].as_u64().unwrap() < 20);

    let roc: serde_json::Value = serde_json::from_str(&d.roc_json()).unwrap();
    let names: Vec<&str> = roc.as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["EventScore", "Raw LR", "MEWS", "qSOFA"]);
    for c in roc.as_array().unwrap() {
        let pts = c["points"].as_array().unwrap();
        assert_eq!(pts.first().unwrap(), &serde_json::json!([0.0, 0.0]));
        assert_eq!(pts.last().unwrap(), &serde_json::json!([1.0, 1.0]));
    }
}

#[test]
fn scoring_sums_contributions() {
    let d = Demo::build(120, 9, 1.0).unwrap();
    let sliders: Vec<serde_json::Value> = serde_json::from_str(&d.sliders_json()).unwrap();
    let values: Vec<f64> = sliders.iter().map(|s| s["value"].as_f64().unwrap()).collect();
    let r = d.score_values(&values).unwrap();
    let sum: f64 = r["contributions"].as_array().unwrap().iter().map(|c| c["contribution"].as_f64().unwrap()).sum();
    let score = r["score"].as_f64().unwrap();
    assert!((r["intercept"].as_f64().unwrap() + sum - score).abs() < 1e-12);
    let p = r["probability"].as_f64().unwrap();
    assert!(p > 0.0 && p < 1.0);
    assert!(d.score_values(&values[1..]).is_err());
}

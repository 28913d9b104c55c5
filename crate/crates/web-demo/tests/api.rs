use lscd_web_demo::{demo_episode_json, loss_curves_json, simplex_landscape_json};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn curves_show_lsd_keeping_its_gradient() {
    let v = parse(loss_curves_json(12.0, 121, 0.01).unwrap());
    let z = v["z"].as_array().unwrap();
    assert_eq!(z.len(), 121);
    assert_eq!(z[120].as_f64().unwrap(), 12.0);
    let curve = |name: &str| {
        v["curves"].as_array().unwrap().iter().find(|c| c["name"] == name).unwrap().clone()
    };
    let at10 = |c: &Value| c["grad"][100].as_f64().unwrap();
    assert!(at10(&curve("entropy")) < 1e-3);
    assert!(at10(&curve("lsd")) > 0.9);
    // symmetric logits: the density-free losses are stationary
    for name in ["entropy", "lsd"] {
        assert!(curve(name)["grad"][0].as_f64().unwrap().abs() < 1e-12, "{name}");
    }
}

#[test]
fn landscape_grid_shape() {
    let v = parse(simplex_landscape_json("lsd", 10, 0.25, 1.0, 1.5, 0.01).unwrap());
    let rows = v["values"].as_array().unwrap();
    assert_eq!(rows.len(), 11);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row.as_array().unwrap().len(), 11 - i);
    }
    // LSD is lowest at the vertices and highest at the centre of the simplex
    let min = v["min"].as_f64().unwrap();
    assert_eq!(rows[10][0].as_f64().unwrap(), min);
    assert!(v["max"].as_f64().unwrap() > min);
    assert!(simplex_landscape_json("tent", 10, 0.25, 1.0, 1.5, 0.01).is_err());
    assert!(simplex_landscape_json("lscd", 10, 0.25, 1.0, 1.5, 0.7).is_err());
    assert!(simplex_landscape_json("lscd", 1, 0.25, 1.0, 1.5, 0.01).is_err());
}

#[test]
fn episode_runs_all_methods() {
    let v = parse(demo_episode_json(3, 6.0, 0.001, 32).unwrap());
    let methods = v["methods"].as_array().unwrap();
    let names: Vec<&str> = methods.iter().map(|m| m["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["frozen", "bn_adapt", "entropy", "lscd"]);
    for m in methods {
        let cum = m["cumulative"].as_array().unwrap();
        assert_eq!(cum.len(), 1200 / 32 + 1);
        assert_eq!(cum.last().unwrap().as_f64(), m["accuracy"].as_f64());
    }
    assert!(v["source_accuracy"].as_f64().unwrap() > 0.8);
    assert!(demo_episode_json(3, 6.0, 0.001, 1).is_err());
}

use kvmix_web::{paging_frames, paging_json, policy_json, policy_view, quantize_view, PagingRequest, PolicyRequest};

#[test]
fn frames_conserve_pages() {
    let frames = paging_frames(&PagingRequest::default()).unwrap();
    let total = PagingRequest::default().total_pages;
    assert!(frames.len() > 3);
    for f in &frames {
        let held = f.pages.iter().filter(|p| p.class != "free").count();
        assert_eq!(held + f.free_count, total, "{}", f.label);
        // Free slots hold exactly the unowned pages.
        let mut free: Vec<u32> = (0..f.free_count).map(|k| f.slots[(f.start + k) % total]).collect();
        free.sort_unstable();
        let unowned: Vec<u32> = f.pages.iter().filter(|p| p.class == "free").map(|p| p.id).collect();
        assert_eq!(free, unowned, "{}", f.label);
    }
    let last = frames.last().unwrap();
    assert_eq!(last.free_count, total);
    let mut ids = last.slots.clone();
    ids.sort_unstable();
    assert_eq!(ids, (0..total as u32).collect::<Vec<_>>());
    assert_eq!(frames.first().unwrap().free_count, total);
}

#[test]
fn small_budget_stops_with_a_labelled_frame() {
    let req = PagingRequest { total_pages: 6, ..PagingRequest::default() };
    let frames = paging_frames(&req).unwrap();
    assert!(frames.iter().any(|f| f.label.contains("rejected") || f.label.contains("stalled")));
}

#[test]
fn policy_classes_cover_every_position() {
    let req = PolicyRequest::default();
    let v = policy_view(&req).unwrap();
    assert_eq!(v.classes.len(), req.prompt_len + req.gen_len);
    let count = |c: &str| v.classes.iter().filter(|x| *x == c).count() as u64;
    assert_eq!((count("high"), count("low"), count("pruned"), count("window")), (v.high, v.low, v.pruned, v.window));
    assert_eq!(v.window, req.window as u64);
    let keep_all = policy_view(&PolicyRequest { alpha_high: 0.0, alpha_low: 0.0, ..req }).unwrap();
    assert_eq!(keep_all.pruned, 0);
}

#[test]
fn quantization_bound_holds_at_every_width() {
    let xs: Vec<f64> = (0..64).map(|i| ((i * 37) % 101) as f64 / 17.0 - 3.0).collect();
    for bits in [8, 4, 2, 1] {
        let v = quantize_view(&xs, bits).unwrap();
        assert!(v.max_error <= v.bound * (1.0 + 1e-12), "{bits}");
    }
}

#[test]
fn json_entry_points_accept_partial_requests() {
    let p: serde_json::Value = serde_json::from_str(&policy_json(r#"{"window": 4}"#)).unwrap();
    assert!(p["classes"].is_array());
    let f: serde_json::Value = serde_json::from_str(&paging_json("{}")).unwrap();
    assert!(f.as_array().unwrap().len() > 1);
    let e: serde_json::Value = serde_json::from_str(&paging_json(r#"{"requests": 0}"#)).unwrap();
    assert!(e["error"].is_string());
}

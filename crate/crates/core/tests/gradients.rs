mod common;

#[test]
fn taped_gradients_match_central_differences() {
    let summary = common::checks::autodiff_cases(20, 5).unwrap();
    println!("{summary}");
}

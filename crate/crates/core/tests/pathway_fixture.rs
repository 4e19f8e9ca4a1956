mod common;

use common::fixture_checks as checks;

#[test]
fn nodes_match_hand_derivation() {
    checks::nodes_match_hand_derivation();
}

#[test]
fn edges_match_hand_derivation() {
    checks::edges_match_hand_derivation();
}

#[test]
fn attacked_nodes_within_bound() {
    checks::attacked_nodes_within_bound();
}

#[test]
fn membership_comparison() {
    checks::membership_comparison();
}

#[test]
fn red_neuron_counts() {
    checks::red_neuron_counts();
}

#[test]
fn contexts_follow_top_k_sets() {
    checks::contexts_follow_top_k_sets();
}

#[test]
fn json_round_trip_is_byte_identical() {
    checks::json_round_trip_is_byte_identical();
}

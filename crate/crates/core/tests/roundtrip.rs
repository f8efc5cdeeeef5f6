mod common;

use common::{knapsack, proposal, travel};
use hybridevo::gene::{parse_from_text, to_text, Gene};
use hybridevo::tasks::synthetic::KnapsackGene;
use proptest::prelude::*;

const CASES: u32 = 1000;

fn round_trips<G: Gene>(g: &G) -> Result<(), TestCaseError> {
    let text = to_text(g);
    let back: G = parse_from_text(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
    prop_assert_eq!(&back, g);
    prop_assert_eq!(to_text(&back), text);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn travel_genes_round_trip(g in travel()) {
        round_trips(&g)?;
    }

    #[test]
    fn proposal_genes_round_trip(g in proposal()) {
        round_trips(&g)?;
    }

    #[test]
    fn synthetic_genes_round_trip(g in knapsack()) {
        round_trips(&g)?;
    }

    #[test]
    fn surrounding_prose_is_ignored(g in knapsack(), before in "[^=]{0,80}", after in "[^=]{0,80}") {
        let wrapped = format!("{before}\n{}\n{after}", to_text(&g));
        prop_assert_eq!(parse_from_text::<KnapsackGene>(&wrapped).unwrap(), g);
    }
}

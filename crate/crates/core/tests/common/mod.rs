//! Gene strategies shared by the property and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use chrono::NaiveDate;
use hybridevo::tasks::proposal::{Heading, ProposalGene, Section};
use hybridevo::tasks::synthetic::{KnapsackGene, KnapsackTables};
use hybridevo::tasks::travel::{Activity, DayPlan, Hotel, Money, TravelGene};
use proptest::prelude::*;

pub fn synthetic_tables() -> KnapsackTables {
    let manifest: serde_json::Value =
        serde_json::from_str(include_str!("../../../../tasks/synthetic/task.json")).unwrap();
    serde_json::from_value(manifest["params"].clone()).unwrap()
}

/// Free text, biased towards content that could confuse the block parser.
pub fn text() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => any::<String>().prop_map(|s| s.chars().take(40).collect()),
        2 => "[A-Za-z0-9 ,.'\"\\\\=\n\t-]{0,40}",
        1 => Just("===GENE-END===".to_string()),
        1 => Just("===GENE-BEGIN kind=travel v=1===\n{}".to_string()),
        1 => Just(String::new()),
    ]
}

pub fn money() -> impl Strategy<Value = Money> {
    (0i64..1_000_000_000).prop_map(Money::from_cents)
}

pub fn date() -> impl Strategy<Value = String> {
    (1970i32..2100, 1u32..=365).prop_map(|(y, d)| NaiveDate::from_yo_opt(y, d).unwrap().format("%Y-%m-%d").to_string())
}

pub fn activities() -> impl Strategy<Value = Vec<Activity>> {
    proptest::collection::btree_set(0u16..1440, 0..6).prop_flat_map(|minutes: BTreeSet<u16>| {
        let n = minutes.len();
        (Just(minutes), proptest::collection::vec((text(), text(), money()), n)).prop_map(|(minutes, parts)| {
            minutes
                .into_iter()
                .zip(parts)
                .map(|(m, (location, description, cost))| Activity {
                    start_time: format!("{:02}:{:02}", m / 60, m % 60),
                    location,
                    description,
                    cost,
                })
                .collect()
        })
    })
}

pub fn travel() -> impl Strategy<Value = TravelGene> {
    (text(), 1u32..30, (text(), money()), proptest::collection::vec((date(), activities()), 0..5), money()).prop_map(
        |(destination, num_days, (name, hotel_cost), days, total_cost)| TravelGene {
            destination,
            num_days,
            hotel: Hotel { name, total_cost: hotel_cost },
            days: days.into_iter().map(|(date, activities)| DayPlan { date, activities }).collect(),
            total_cost,
        },
    )
}

pub fn proposal() -> impl Strategy<Value = ProposalGene> {
    (text(), Just(Heading::ALL.to_vec()).prop_shuffle(), 0usize..=5, proptest::collection::vec(text(), 5)).prop_map(
        |(topic, order, n, bodies)| {
            let sections =
                order.into_iter().take(n).zip(bodies).map(|(heading, body)| Section { heading, body }).collect();
            ProposalGene::new(topic, sections)
        },
    )
}

pub fn knapsack() -> impl Strategy<Value = KnapsackGene> {
    proptest::collection::vec(any::<u32>(), 0..12).prop_map(|choices| KnapsackGene { choices })
}

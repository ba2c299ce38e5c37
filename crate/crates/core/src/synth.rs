//! Seeded synthetic WPN corpora with planted campaigns and known ground
//! truth. Stands in for a live crawl in tests and demos.

use std::collections::{BTreeMap, HashSet};

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::model::{Platform, WpnRecord};
use crate::psl::PublicSuffixList;

/// One planted campaign. In the text templates `{fill}` becomes a random
/// filler and `{id}` a token unique to the message; `{v}` in the path
/// template becomes a random query value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedCampaign {
    pub name: String,
    pub title_template: String,
    pub body_template: String,
    pub fillers: Vec<String>,
    pub messages: usize,
    pub source_domains: usize,
    pub landing_domains: usize,
    pub path_template: String,
    /// Land back on the site that pushed the message.
    #[serde(default)]
    pub lands_on_source: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignPlan {
    pub campaigns: Vec<PlantedCampaign>,
    /// Number of unrelated one-off messages.
    pub noise: usize,
    pub seed: u64,
}

impl CampaignPlan {
    /// Three campaigns modelled on typical clusters: a multi-source
    /// giveaway scam, a multi-source fake payment alert and a single-source
    /// bank offer. Sizes are scaled by `scale` (1 gives 40/12/4 messages).
    pub fn reference(scale: usize, noise: usize, seed: u64) -> Self {
        let scale = scale.max(1);
        CampaignPlan {
            campaigns: vec![
                PlantedCampaign {
                    name: "giveaway".into(),
                    title_template: "Congratulations! You won a free iPhone 11 Pro".into(),
                    body_template: "Claim your prize now before the giveaway ends. Entry {id}".into(),
                    fillers: vec![],
                    messages: 40 * scale,
                    source_domains: 8,
                    landing_domains: 3,
                    path_template: "/offers/giveaway/claim.php?uid={v}&src={v}".into(),
                    lands_on_source: false,
                },
                PlantedCampaign {
                    name: "payment-alert".into(),
                    title_template: "PayPal: ${id} deposited to your account".into(),
                    body_template: "Your balance increased. Confirm the transfer to withdraw funds".into(),
                    fillers: vec![],
                    messages: 12 * scale,
                    source_domains: 5,
                    landing_domains: 2,
                    path_template: "/secure/account/confirm.html?ref={v}".into(),
                    lands_on_source: false,
                },
                PlantedCampaign {
                    name: "bank-offer".into(),
                    title_template: "Your pre-approved loan offer".into(),
                    body_template: "Check your personalized mortgage rates today".into(),
                    fillers: vec![],
                    messages: 4 * scale,
                    source_domains: 1,
                    landing_domains: 1,
                    path_template: "/loans/offer?id={v}".into(),
                    lands_on_source: true,
                },
            ],
            noise,
            seed,
        }
    }

    pub fn total_messages(&self) -> usize {
        self.campaigns.iter().map(|c| c.messages).sum::<usize>() + self.noise
    }
}

/// Record id → planted group. Campaigns are groups `0..campaigns`; each
/// noise message is its own group after that.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub group_names: Vec<String>,
    pub membership: BTreeMap<String, usize>,
}

impl GroundTruth {
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.group_names.len()];
        for g in self.membership.values() {
            sizes[*g] += 1;
        }
        sizes
    }

    pub fn group_of(&self, id: &str) -> Option<usize> {
        self.membership.get(id).copied()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    pub truth: GroundTruth,
}

struct WordMint {
    used: HashSet<String>,
}

impl WordMint {
    const CONSONANTS: &'static [u8] = b"bcdfghjklmnpqrstvwxz";
    const VOWELS: &'static [u8] = b"aeiou";

    fn new(reserved: impl IntoIterator<Item = String>) -> Self {
        WordMint {
            used: reserved.into_iter().collect(),
        }
    }

    /// A fresh pronounceable word not handed out before.
    fn fresh(&mut self, rng: &mut impl Rng) -> String {
        loop {
            let syllables = rng.random_range(3..=4);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(Self::CONSONANTS[rng.random_range(0..Self::CONSONANTS.len())] as char);
                w.push(Self::VOWELS[rng.random_range(0..Self::VOWELS.len())] as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

const SOURCE_TLDS: &[&str] = &["com", "net", "org", "info", "co.uk"];

fn validate(plan: &CampaignPlan) -> Result<()> {
    if plan.campaigns.is_empty() && plan.noise == 0 {
        return Err(Error::Param("plan has no campaigns and no noise".into()));
    }
    for c in &plan.campaigns {
        if c.messages == 0 || c.source_domains == 0 || c.landing_domains == 0 {
            return Err(Error::Param(format!(
                "campaign `{}` needs at least one message, source and landing domain",
                c.name
            )));
        }
        if c.fillers.is_empty() && (c.title_template.contains("{fill}") || c.body_template.contains("{fill}")) {
            return Err(Error::Param(format!("campaign `{}` has a {{fill}} slot but no fillers", c.name)));
        }
    }
    Ok(())
}

fn reserved_words(plan: &CampaignPlan) -> Vec<String> {
    plan.campaigns
        .iter()
        .flat_map(|c| {
            let text = format!("{} {} {}", c.title_template, c.body_template, c.path_template);
            crate::tokenize::text_tokens(&text, "")
                .into_iter()
                .chain(c.fillers.iter().cloned())
                .collect::<Vec<_>>()
        })
        .collect()
}

fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, 1, 6, 0, 0, 0).single().expect("valid date")
}

fn fill_text(template: &str, fill: &str, mint: &mut WordMint, rng: &mut impl Rng) -> String {
    let mut text = template.replace("{fill}", fill);
    while text.contains("{id}") {
        let token = format!("{}{}", mint.fresh(rng), rng.random_range(10u32..99));
        text = text.replacen("{id}", &token, 1);
    }
    text
}

struct Draft {
    group: usize,
    source: String,
    landing: String,
    title: String,
    body: String,
}

pub fn generate_synthetic(plan: &CampaignPlan) -> Result<SyntheticCorpus> {
    validate(plan)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut mint = WordMint::new(reserved_words(plan));
    let mut drafts = Vec::with_capacity(plan.total_messages());
    let mut group_names = Vec::new();

    for (g, c) in plan.campaigns.iter().enumerate() {
        group_names.push(c.name.clone());
        let sources: Vec<String> = (0..c.source_domains)
            .map(|_| {
                let tld = SOURCE_TLDS[rng.random_range(0..SOURCE_TLDS.len())];
                format!("{}.{tld}", mint.fresh(&mut rng))
            })
            .collect();
        let landings: Vec<String> = if c.lands_on_source {
            sources.clone()
        } else {
            (0..c.landing_domains)
                .map(|_| format!("{}.com", mint.fresh(&mut rng)))
                .collect()
        };
        for m in 0..c.messages {
            let fill = if c.fillers.is_empty() {
                String::new()
            } else {
                c.fillers[rng.random_range(0..c.fillers.len())].clone()
            };
            let mut path = c.path_template.clone();
            while path.contains("{v}") {
                path = path.replacen("{v}", &rng.random_range(10_000u32..99_999).to_string(), 1);
            }
            let source = sources[m % sources.len()].clone();
            let landing_host = if c.lands_on_source {
                format!("www.{}", sources[m % sources.len()])
            } else {
                format!("www.{}", landings[m % landings.len()])
            };
            drafts.push(Draft {
                group: g,
                source,
                landing: format!("https://{landing_host}{path}"),
                title: fill_text(&c.title_template, &fill, &mut mint, &mut rng),
                body: fill_text(&c.body_template, &fill, &mut mint, &mut rng),
            });
        }
    }

    for i in 0..plan.noise {
        group_names.push(format!("noise-{i}"));
        let words: Vec<String> = (0..3).map(|_| mint.fresh(&mut rng)).collect();
        let p: Vec<String> = (0..3).map(|_| mint.fresh(&mut rng)).collect();
        drafts.push(Draft {
            group: plan.campaigns.len() + i,
            source: format!("{}.com", mint.fresh(&mut rng)),
            landing: format!(
                "https://{}.net/{}/{}.html?{}={}",
                mint.fresh(&mut rng),
                p[0],
                p[1],
                p[2],
                rng.random_range(1..1000)
            ),
            // Each word appears twice so it survives the vocabulary cut.
            title: format!("{} {} {}", words[0], words[1], words[2]),
            body: format!("{} {} {}", words[2], words[0], words[1]),
        });
    }

    drafts.shuffle(&mut rng);

    let psl = PublicSuffixList::bundled();
    let mut records = Vec::with_capacity(drafts.len());
    let mut membership = BTreeMap::new();
    for (i, d) in drafts.into_iter().enumerate() {
        let id = format!("syn-{:x}-{i:05}", plan.seed);
        let source_url = format!("https://www.{}/news/{}", d.source, rng.random_range(1..500));
        let source_etld1 = psl.etld_plus_one(&format!("www.{}", d.source))?;
        let network = ["pushengage", "onesignal", "izooto", "pushwoosh"][rng.random_range(0..4)];
        let platform = if rng.random_bool(0.5) {
            Platform::Desktop
        } else {
            Platform::Mobile
        };
        membership.insert(id.clone(), d.group);
        records.push(WpnRecord {
            id,
            source_url,
            source_etld1,
            sw_script_url: format!("https://www.{}/sw.js?network={network}", d.source),
            title: d.title,
            body: d.body,
            icon_url: Some(format!("https://cdn.{network}.com/icons/{}.png", rng.random_range(1..50))),
            redirect_chain: vec![
                format!("https://track.{network}.com/click?c={}", rng.random_range(1..100_000)),
                d.landing.clone(),
            ],
            landing_url: Some(d.landing),
            platform,
            collected_at: epoch() + Duration::minutes(i as i64 * 7),
            clicked: true,
        });
    }

    Ok(SyntheticCorpus {
        dataset: Dataset::from_records(records)?,
        truth: GroundTruth {
            group_names,
            membership,
        },
    })
}

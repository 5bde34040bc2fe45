//! The 48-question open-response catalog and its question → condition map.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::CONDITIONS;

/// `(id, text)` for every catalog question, in bank order.
pub const QUESTIONS: [(&str, &str); 48] = [
    ("G1", "Describe your mental health in a paragraph."),
    ("G2", "Describe your mental health in five words."),
    ("G3", "How has your mental health influenced your behavior in the past few weeks?"),
    ("G4", "How has your mental health influenced your work performance lately?"),
    ("G5", "Describe how your body felt in the past few weeks."),
    ("G6", "Describe things you have been unable to do or concentrate on due to your mental health."),
    ("G7", "How has your mood influenced your daily life in the past few weeks?"),
    ("G8", "How long have you been experiencing your main mental health symptoms?"),
    ("G9", "How have your attention and activity level influenced your social relationships?"),
    ("G91", "How have your attention and activity level influenced your work?"),
    ("G10", "When did you first notice difficulties with your mental health?"),
    ("G12", "How have your emotions and social relations been influenced by your mental health?"),
    ("OMD1", "Describe changes, if any, in your mood or emotions in the past few weeks."),
    ("OMD2", "Describe a persistent mood or emotion you experienced in the past few weeks."),
    ("OMD3", "Describe your ability to enjoy things in the past few weeks."),
    ("OMD4", "Describe how your appetite has been lately."),
    ("OMD5", "Describe how your sleep has been lately."),
    ("OMD6", "Describe how your motivation or energy level has been lately."),
    ("A1", "Describe your worries and their strength in the past few weeks."),
    ("A3", "Describe how your mood has influenced your behavior in the past few weeks."),
    ("A4", "Describe places or activities you have avoided due to anxiety."),
    ("BD2", "Describe any recurring cycle of mood swings from highs to lows."),
    ("BD3", "Describe impulsive or risky behaviors you have engaged in lately."),
    ("ASD2", "Describe your typical social interaction and way of communicating."),
    ("ASD3", "Describe situations where you focus intensely on specific topics or activities."),
    ("ASD4", "Describe situations where your senses were overwhelmed or distressed."),
    ("ASD5", "Describe your daily routine and how you feel when it changes."),
    ("ASD6", "Describe how you navigate and maintain social relationships."),
    ("SUB1", "List drugs or substances you have used, including alcohol."),
    ("SUB2", "Describe the circumstances under which you use substances."),
    ("SUB3", "Describe your thoughts and feelings when you are not using substances."),
    ("SUB4", "Describe consequences you experienced due to substance use."),
    ("SUB5", "Describe risky behavior you engage in while using substances."),
    ("SUB6", "Describe your tolerance level towards substances."),
    ("OCD1", "Describe recurring thoughts you experienced in the past few weeks."),
    ("OCD2", "Describe actions or rituals you felt compelled to perform repeatedly."),
    ("OCD3", "Describe obsessive thoughts or compulsions you attempted to resist."),
    ("ADHD1", "Describe your attention during tasks or assignments."),
    ("ADHD2", "Describe restlessness, impulsivity, or decisions made without thinking them through."),
    ("PTSD1", "Describe impactful events that still influence your life, in a paragraph."),
    ("PTSD2", "Describe impactful events that still influence your life in five words."),
    ("PTSD4", "What was the traumatic event?"),
    ("ED1", "Describe eating habits that differ from other people."),
    ("ED2", "Describe your thoughts about food."),
    ("ED3", "Describe your thoughts about your weight, shape, or appearance."),
    ("ED4", "Describe the control over your eating behavior and related feelings."),
    ("ED5", "Describe behaviors and emotions you relate to food."),
    ("ED6", "Describe the impact your eating behaviors have on daily life and relationships."),
];

/// Conditions a question id targets, by prefix. General questions (`G…`)
/// and unknown prefixes map to no condition.
pub fn conditions_for(question: &str) -> Vec<&'static str> {
    let prefix: String = question.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
    match prefix.as_str() {
        "OMD" => vec!["depression"],
        "A" => vec!["anxiety"],
        "BD" => vec!["bipolar"],
        "ASD" => vec!["autism"],
        "SUB" => vec!["drug_use", "alcohol_use"],
        "OCD" => vec!["ocd"],
        "ADHD" => vec!["adhd"],
        "PTSD" => vec!["ptsd"],
        "ED" => vec!["eating"],
        _ => vec![],
    }
}

pub fn is_general(question: &str) -> bool {
    question.starts_with('G')
}

pub fn question_ids() -> Vec<String> {
    QUESTIONS.iter().map(|(id, _)| id.to_string()).collect()
}

pub fn question_texts() -> Vec<String> {
    QUESTIONS.iter().map(|(_, t)| t.to_string()).collect()
}

pub fn conditions() -> Vec<String> {
    CONDITIONS.iter().map(|c| c.to_string()).collect()
}

/// Explicit question → condition assignment; an empty list marks a
/// general question.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QuestionMap(pub IndexMap<String, Vec<String>>);

impl QuestionMap {
    pub fn by_prefix<S: AsRef<str>>(ids: &[S]) -> Self {
        Self(
            ids.iter()
                .map(|id| {
                    let id = id.as_ref();
                    (id.to_string(), conditions_for(id).into_iter().map(String::from).collect())
                })
                .collect(),
        )
    }

    pub fn conditions_of(&self, question: &str) -> &[String] {
        self.0.get(question).map_or(&[], Vec::as_slice)
    }

    pub fn is_general(&self, question: &str) -> bool {
        self.conditions_of(question).is_empty()
    }

    pub fn targets(&self, question: &str, condition: &str) -> bool {
        self.conditions_of(question).iter().any(|c| c == condition)
    }
}

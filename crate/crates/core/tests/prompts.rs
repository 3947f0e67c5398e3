use dka_core::answer::build_answer_prompt;
use dka_core::{Caption, IcExample, KnowledgeItem, KnowledgeSource};

const QUESTION: &str = "What animal has similar color to the flower in the image?";

fn golden(name: &str) -> String {
    std::fs::read_to_string(std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

fn examples() -> Vec<IcExample> {
    [
        ("What color is a fire truck?", "a red fire truck parked on a street", "red"),
        ("What sport is this?", "a man riding a wave", "surfing"),
    ]
    .into_iter()
    .map(|(q, c, a)| IcExample {
        question_text: q.into(),
        caption_text: c.into(),
        answer_text: a.into(),
        question_embedding: vec![1.0],
        image_embedding: vec![1.0],
    })
    .collect()
}

#[test]
fn answer_prompt_matches_golden() {
    let knowledge: Vec<KnowledgeItem> = [
        ("flamingos are pink", KnowledgeSource::Elicited),
        ("cardinals are red", KnowledgeSource::Elicited),
        ("a garden   path", KnowledgeSource::LocalCaption),
    ]
    .into_iter()
    .map(|(t, s)| KnowledgeItem::new(t, s).unwrap())
    .collect();
    let caption = Caption::new("a pink flower in a garden", "What's the color of the flower?").unwrap();
    let bundle = build_answer_prompt(QUESTION, &caption, &knowledge, &examples());
    assert_eq!(bundle.prompt_text, golden("answer_prompt.txt"));
    assert_eq!(bundle.knowledge_used, knowledge);
}

#[test]
fn ablated_answer_prompt_matches_golden() {
    let bundle = build_answer_prompt(QUESTION, &Caption::omitted(), &[], &examples());
    assert_eq!(bundle.prompt_text, golden("answer_prompt_ablated.txt"));
}

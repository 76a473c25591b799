//! Shared scripted fixture: a 20-query Chinese QA dataset, a small
//! guideline corpus, and a config whose mock backends answer every stage
//! by pattern rules, so whole-pipeline runs are deterministic at any
//! parallelism level.
//!
//! Expected judge outcomes are pinned per query in [`QUERIES`]:
//! Method A: 12 pass / 6 fail / 2 invalid; Method B: 10 pass / 10 fail
//! (two of the failures via the language gate on English answers).

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use picorag::backend::mock::{OneOrMany, ScriptRule};
use picorag::backend::{BackendSpec, Registry};
use picorag::classify::Taxonomy;
use picorag::index::{build_index, BuildParams, CorpusDoc, VectorIndex};
use picorag::pipeline::Services;
use picorag::template::TemplateSet;
use picorag::types::{RunConfig, Stage};

/// One fixture query with its scripted behavior at every stage.
pub struct FixtureQuery {
    pub id: &'static str,
    /// Unique salient keyword; appears in the question, the scripted
    /// expansion, and the scripted PICO fields.
    pub keyword: &'static str,
    pub question: &'static str,
    pub gold: &'static str,
    /// Unique gold fragment the judge rules key on.
    pub gold_key: &'static str,
    pub discipline_label: Option<&'static str>,
    pub expanded: &'static str,
    pub pico: (&'static str, &'static str, &'static str),
    /// Scripted generator answer; `None` means the default Chinese answer.
    pub answer: Option<&'static str>,
    pub judge_a: &'static str,
    pub judge_b: &'static str,
}

pub const DEFAULT_ANSWER: &str = "根据检索到的指南，建议注意休息、多饮水，症状持续或加重请及时就医。[1]";

pub const QUERIES: [FixtureQuery; 20] = [
    FixtureQuery {
        id: "q01",
        keyword: "鼻塞",
        question: "这几天鼻塞流鼻涕，晚上睡不好怎么办",
        gold: "鼻塞可以用生理盐水冲洗鼻腔，避免接触过敏原。",
        gold_key: "生理盐水冲洗鼻腔",
        discipline_label: Some("Otorhinolaryngology"),
        expanded: "成年患者出现鼻塞伴流涕，夜间加重，应如何规范处理？",
        pico: ("成年鼻塞患者", "生理盐水鼻腔冲洗", "夜间通气改善"),
        answer: None,
        judge_a: "YES",
        judge_b: "YES",
    },
    FixtureQuery {
        id: "q02",
        keyword: "发烧",
        question: "宝宝半夜发烧38度5要不要去医院",
        gold: "幼儿发烧38.5度可先物理降温并观察精神状态。",
        gold_key: "物理降温并观察",
        discipline_label: Some("Pediatrics"),
        expanded: "幼儿夜间发烧38.5摄氏度，应如何评估与护理？",
        pico: ("发烧幼儿", "物理降温", "体温下降"),
        answer: None,
        judge_a: "YES",
        judge_b: "NO",
    },
    FixtureQuery {
        id: "q03",
        keyword: "胃疼",
        question: "最近老是胃疼反酸，吃什么药好",
        gold: "胃疼反酸建议查幽门螺杆菌，规律饮食少食多餐。",
        gold_key: "查幽门螺杆菌",
        discipline_label: None,
        expanded: "患者反复胃疼伴反酸，应如何检查与用药？",
        pico: ("胃疼反酸患者", "抑酸药物", "症状缓解"),
        answer: None,
        judge_a: "NO",
        judge_b: "YES",
    },
    FixtureQuery {
        id: "q04",
        keyword: "高血压",
        question: "体检查出高血压要一直吃药吗",
        gold: "高血压通常需长期规律服药并监测血压。",
        gold_key: "长期规律服药",
        discipline_label: None,
        expanded: "新诊断高血压患者是否需要长期药物治疗？",
        pico: ("高血压患者", "长期降压药物", "血压达标"),
        answer: None,
        judge_a: "YES",
        judge_b: "NO",
    },
    FixtureQuery {
        id: "q05",
        keyword: "血糖",
        question: "血糖有点高但还没到糖尿病怎么办",
        gold: "血糖偏高应控制饮食增加运动，定期复查糖耐量。",
        gold_key: "复查糖耐量",
        discipline_label: None,
        expanded: "血糖偏高的糖耐量受损人群应如何生活方式干预？",
        pico: ("血糖偏高人群", "饮食运动干预", "血糖恢复正常"),
        answer: None,
        judge_a: "maybe",
        judge_b: "YES",
    },
    FixtureQuery {
        id: "q06",
        keyword: "湿疹",
        question: "胳膊上起湿疹特别痒抓破了怎么办",
        gold: "湿疹瘙痒避免抓挠，外用保湿剂和弱效激素药膏。",
        gold_key: "外用保湿剂",
        discipline_label: Some("Dermatology"),
        expanded: "上肢湿疹伴瘙痒抓损，应如何外用治疗？",
        pico: ("湿疹患者", "保湿剂与外用激素", "瘙痒缓解"),
        answer: None,
        judge_a: "NO",
        judge_b: "YES",
    },
    FixtureQuery {
        id: "q07",
        keyword: "失眠",
        question: "长期失眠多梦白天没精神咋办",
        gold: "失眠建议固定作息，睡前远离手机，必要时就诊。",
        gold_key: "固定作息",
        discipline_label: None,
        expanded: "慢性失眠伴日间困倦，应如何进行睡眠卫生管理？",
        pico: ("失眠患者", "睡眠卫生干预", "睡眠质量改善"),
        answer: None,
        judge_a: "YES",
        judge_b: "YES",
    },
    FixtureQuery {
        id: "q08",
        keyword: "月经",
        question: "月经两个月没来但没怀孕怎么回事",
        gold: "月经推迟两月应查性激素六项和甲功，排除多囊。",
        gold_key: "性激素六项",
        discipline_label: None,
        expanded: "非妊娠女性月经推迟两个月，应如何检查病因？",
        pico: ("月经推迟女性", "内分泌检查", "明确病因"),
        answer: None,
        judge_a: "YES",
        judge_b: "NO",
    },
    FixtureQuery {
        id: "q09",
        keyword: "牙龈",
        question: "刷牙时牙龈老出血是缺维生素吗",
        gold: "牙龈出血多因牙结石牙龈炎，建议洗牙并正确刷牙。",
        gold_key: "牙结石牙龈炎",
        discipline_label: None,
        expanded: "刷牙时反复牙龈出血，应如何鉴别与处理？",
        pico: ("牙龈出血患者", "洁治与口腔卫生", "出血停止"),
        answer: None,
        judge_a: "NO",
        judge_b: "YES",
    },
    FixtureQuery {
        id: "q10",
        keyword: "近视",
        question: "孩子近视越来越深怎么办",
        gold: "近视加深应增加户外活动，规范验光配镜并定期复查。",
        gold_key: "增加户外活动",
        discipline_label: None,
        expanded: "儿童近视度数进行性加深，应如何干预？",
        pico: ("近视儿童", "户外活动与配镜", "进展减缓"),
        answer: Some("Please take the child to an ophthalmologist for cycloplegic refraction and schedule regular follow-up."),
        judge_a: "YES",
        judge_b: "YES",
    },
    FixtureQuery {
        id: "q11",
        keyword: "腰椎",
        question: "腰椎间盘突出疼得直不起腰能不能做手术",
        gold: "腰椎间盘突出多数先保守治疗，无效或神经受损再手术。",
        gold_key: "先保守治疗",
        discipline_label: None,
        expanded: "腰椎间盘突出急性疼痛，手术指征是什么？",
        pico: ("腰椎间盘突出患者", "保守治疗与手术评估", "疼痛缓解"),
        answer: None,
        judge_a: "YES",
        judge_b: "NO",
    },
    FixtureQuery {
        id: "q12",
        keyword: "尿频",
        question: "最近尿频尿急晚上起夜好几次",
        gold: "尿频尿急应查尿常规排除感染，男性注意前列腺。",
        gold_key: "查尿常规",
        discipline_label: None,
        expanded: "尿频尿急伴夜尿增多，应如何初步检查？",
        pico: ("尿频尿急患者", "尿常规检查", "症状控制"),
        answer: None,
        judge_a: "NO",
        judge_b: "YES",
    },
    FixtureQuery {
        id: "q13",
        keyword: "咳嗽",
        question: "感冒好了还一直咳嗽有痰怎么办",
        gold: "感染后咳嗽可对症止咳化痰，超过八周需查胸片。",
        gold_key: "止咳化痰",
        discipline_label: None,
        expanded: "感冒后迁延性咳嗽伴咳痰，应如何处理？",
        pico: ("感染后咳嗽患者", "对症止咳化痰", "咳嗽缓解"),
        answer: None,
        judge_a: "YES",
        judge_b: "NO",
    },
    FixtureQuery {
        id: "q14",
        keyword: "贫血",
        question: "查出来贫血平时吃什么补得快",
        gold: "缺铁性贫血可补充铁剂并多吃红肉动物肝脏。",
        gold_key: "补充铁剂",
        discipline_label: None,
        expanded: "缺铁性贫血患者应如何膳食与补铁治疗？",
        pico: ("贫血患者", "铁剂与膳食补铁", "血红蛋白回升"),
        answer: None,
        judge_a: "YES",
        judge_b: "NO",
    },
    FixtureQuery {
        id: "q15",
        keyword: "甲状腺",
        question: "体检发现甲状腺结节严重吗",
        gold: "甲状腺结节多为良性，按超声分级随访或穿刺。",
        gold_key: "按超声分级",
        discipline_label: None,
        expanded: "体检发现的甲状腺结节应如何评估随访？",
        pico: ("甲状腺结节患者", "超声分级随访", "排除恶性"),
        answer: None,
        judge_a: "NO",
        judge_b: "YES",
    },
    FixtureQuery {
        id: "q16",
        keyword: "痔疮",
        question: "痔疮犯了坐都坐不住用什么药",
        gold: "痔疮急性期可温水坐浴配合外用栓剂，保持大便通畅。",
        gold_key: "温水坐浴",
        discipline_label: None,
        expanded: "痔疮急性发作疼痛明显，应如何药物处理？",
        pico: ("痔疮发作患者", "坐浴与外用栓剂", "疼痛缓解"),
        answer: Some("Warm sitz baths and topical suppositories usually relieve an acute hemorrhoid flare; see a doctor if bleeding persists."),
        judge_a: "YES",
        judge_b: "YES",
    },
    FixtureQuery {
        id: "q17",
        keyword: "耳鸣",
        question: "耳鸣嗡嗡响听力也下降了咋回事",
        gold: "突发耳鸣伴听力下降要尽快就诊，警惕突聋。",
        gold_key: "警惕突聋",
        discipline_label: None,
        expanded: "耳鸣伴听力下降，应如何紧急评估？",
        pico: ("耳鸣患者", "听力学检查", "听力恢复"),
        answer: None,
        judge_a: "YES",
        judge_b: "NO",
    },
    FixtureQuery {
        id: "q18",
        keyword: "腹泻",
        question: "吃坏肚子腹泻一天跑了七八趟",
        gold: "急性腹泻注意补液防脱水，便血发热需就医。",
        gold_key: "补液防脱水",
        discipline_label: None,
        expanded: "急性感染性腹泻应如何补液与观察？",
        pico: ("急性腹泻患者", "口服补液", "脱水纠正"),
        answer: None,
        judge_a: "NO",
        judge_b: "YES",
    },
    FixtureQuery {
        id: "q19",
        keyword: "骨折",
        question: "脚踝骨折拆了石膏多久能走路",
        gold: "骨折拆石膏后需循序渐进康复训练，一般数周恢复负重。",
        gold_key: "循序渐进康复",
        discipline_label: None,
        expanded: "踝部骨折固定解除后应如何康复负重？",
        pico: ("骨折康复期患者", "渐进负重训练", "行走功能恢复"),
        answer: None,
        judge_a: "YES",
        judge_b: "NO",
    },
    FixtureQuery {
        id: "q20",
        keyword: "化疗",
        question: "化疗后恶心吃不下饭怎么缓解",
        gold: "化疗后恶心可用止吐药物，少量多餐清淡饮食。",
        gold_key: "止吐药物",
        discipline_label: None,
        expanded: "化疗相关恶心呕吐应如何药物与饮食管理？",
        pico: ("化疗患者", "止吐药物与饮食调整", "恶心缓解"),
        answer: None,
        judge_a: "maybe",
        judge_b: "YES",
    },
];

/// Expected Method-A counts: pass/fail/invalid.
pub const EXPECTED_A: (usize, usize, usize) = (12, 6, 2);
/// Expected Method-B counts: pass/fail/invalid (two fails via the
/// language gate on the English answers of q10 and q16).
pub const EXPECTED_B: (usize, usize, usize) = (10, 10, 0);

/// Guideline corpus: self-contained Chinese snippets. Deliberately avoids
/// the q10/q16 keywords so the English-answer generator rules can only be
/// triggered by the query text.
pub fn corpus_docs() -> Vec<(&'static str, &'static str)> {
    vec![
        ("g-ent", "鼻塞和流涕常见于急性上呼吸道感染和过敏性鼻炎。可用生理盐水冲洗鼻腔，保持室内湿度。症状超过十天或伴面部胀痛时应就诊。过敏体质者应减少接触尘螨与花粉。"),
        ("g-peds", "儿童发烧首选对症处理：体温超过38.5摄氏度且伴不适时可使用退热药，同时适量补充水分。出现精神萎靡、惊厥或持续高热时需要立即就医。物理降温可作为辅助手段。"),
        ("g-gi", "胃疼伴反酸者应规律饮食，避免辛辣与浓茶咖啡。反复发作建议检测幽门螺杆菌并在医生指导下使用抑酸药物。急性腹泻的处理以口服补液为主，预防脱水。出现便血或持续发热需要就医。"),
        ("g-cardio", "高血压的管理强调长期规律服药与家庭血压监测。限盐、减重与规律运动是基础措施。血压达标后不应自行停药，应由医生评估调整方案。"),
        ("g-endo", "血糖偏高但未达糖尿病诊断标准者，应通过控制总热量、增加运动来干预，并定期复查糖耐量。甲状腺结节多数为良性，按超声分级决定随访间隔或穿刺评估。"),
        ("g-derm", "湿疹的基础治疗是修复皮肤屏障：规律外用保湿剂，急性期短期使用弱效激素药膏。避免搔抓与热水烫洗。继发感染时需抗感染治疗。"),
        ("g-neuro", "慢性失眠的一线干预是睡眠卫生教育与认知行为治疗：固定作息时间，睡前避免使用电子设备与咖啡因。长期失眠伴情绪问题时建议专科就诊。"),
        ("g-resp", "感染后咳嗽多为自限性，可对症止咳化痰。咳嗽超过八周属于慢性咳嗽，应行胸片与肺功能检查。伴咯血、消瘦者需尽早就医。"),
        ("g-ortho", "骨折固定解除后的康复应循序渐进：先恢复关节活动度，再进行渐进负重训练。康复期间出现明显肿痛应复查。腰椎间盘突出多数患者经保守治疗可缓解，出现神经功能损害时考虑手术。"),
        ("g-onco", "化疗相关恶心呕吐应按致吐风险分级预防性使用止吐药物，配合少量多餐、清淡饮食。营养摄入不足时请营养科会诊。耳鸣伴突发听力下降者应在72小时内就诊，警惕突发性耳聋。"),
        ("g-uro", "尿频尿急的初步评估包括尿常规与泌尿系超声，男性应注意前列腺情况。月经推迟的非妊娠女性建议检测性激素六项与甲状腺功能。牙龈出血常由牙结石和牙龈炎引起，应定期洁治。贫血患者应先明确类型，缺铁性贫血可补充铁剂并调整膳食。"),
    ]
}

pub struct Fixture {
    pub dir: PathBuf,
    pub dataset: PathBuf,
    pub corpus: PathBuf,
    pub index: PathBuf,
    pub config: PathBuf,
}

fn rule(contains: &str, response: &str) -> ScriptRule {
    ScriptRule {
        contains: OneOrMany::One(contains.to_string()),
        response: response.to_string(),
    }
}

/// The scripted backend specs, one per stage (ids match stage names so
/// bindings resolve by name).
pub fn backend_specs() -> BTreeMap<String, BackendSpec> {
    let mut backends = BTreeMap::new();
    backends.insert(
        "classifier".to_string(),
        BackendSpec::ScriptedMock {
            script: vec![],
            rules: vec![],
            default: Some("Internal Medicine".to_string()),
        },
    );
    backends.insert(
        "expander".to_string(),
        BackendSpec::ScriptedMock {
            script: vec![],
            rules: QUERIES.iter().map(|q| rule(q.keyword, q.expanded)).collect(),
            default: Some("患者应如何规范就诊？".to_string()),
        },
    );
    backends.insert(
        "extractor".to_string(),
        BackendSpec::ScriptedMock {
            script: vec![],
            rules: QUERIES
                .iter()
                .map(|q| {
                    rule(
                        q.keyword,
                        &format!("P: {}\nI: {}\nC: none\nO: {}", q.pico.0, q.pico.1, q.pico.2),
                    )
                })
                .collect(),
            default: Some("P: 患者\nI: 对症处理\nC: none\nO: 好转".to_string()),
        },
    );
    backends.insert(
        "generator".to_string(),
        BackendSpec::ScriptedMock {
            script: vec![],
            rules: QUERIES
                .iter()
                .filter_map(|q| q.answer.map(|a| rule(q.keyword, a)))
                .collect(),
            default: Some(DEFAULT_ANSWER.to_string()),
        },
    );
    backends.insert(
        "judge_a".to_string(),
        BackendSpec::ScriptedMock {
            script: vec![],
            rules: QUERIES
                .iter()
                .filter(|q| q.judge_a != "YES")
                .map(|q| rule(q.gold_key, q.judge_a))
                .collect(),
            default: Some("YES".to_string()),
        },
    );
    backends.insert(
        "judge_b".to_string(),
        BackendSpec::ScriptedMock {
            script: vec![],
            rules: QUERIES
                .iter()
                .filter(|q| q.judge_b != "YES")
                .map(|q| rule(q.gold_key, q.judge_b))
                .collect(),
            default: Some("YES".to_string()),
        },
    );
    backends.insert("embedder".to_string(), BackendSpec::HashEmbed { dim: 64 });
    backends
}

pub fn dataset_jsonl() -> String {
    let mut out = String::new();
    for q in &QUERIES {
        let mut obj = serde_json::Map::new();
        obj.insert("id".into(), q.id.into());
        obj.insert("question".into(), q.question.into());
        obj.insert("gold_answer".into(), q.gold.into());
        if let Some(d) = q.discipline_label {
            obj.insert("discipline".into(), d.into());
        }
        out.push_str(&serde_json::Value::Object(obj).to_string());
        out.push('\n');
    }
    out
}

pub fn corpus_jsonl() -> String {
    let mut out = String::new();
    for (doc_id, text) in corpus_docs() {
        out.push_str(
            &serde_json::json!({"doc_id": doc_id, "title": doc_id, "text": text}).to_string(),
        );
        out.push('\n');
    }
    out
}

#[derive(serde::Serialize)]
struct ConfigDoc {
    language: String,
    seed: u64,
    top_k: usize,
    deterministic: bool,
    parallelism: usize,
    index: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    cache: Option<String>,
    backends: BTreeMap<String, BackendSpec>,
}

/// Writes dataset, corpus, config, and a prebuilt index into `dir`.
/// `cache` adds a response-cache path to the config.
pub fn write_fixture(dir: &Path, cache: bool) -> Fixture {
    let dataset = dir.join("dataset.jsonl");
    let corpus = dir.join("corpus.jsonl");
    let index = dir.join("index.jsonl");
    let config = dir.join("config.toml");
    std::fs::write(&dataset, dataset_jsonl()).unwrap();
    std::fs::write(&corpus, corpus_jsonl()).unwrap();

    let mut registry = Registry::new();
    registry
        .register("embedder", &BackendSpec::HashEmbed { dim: 64 })
        .unwrap();
    let docs = corpus_docs().into_iter().map(|(doc_id, text)| {
        Ok(CorpusDoc {
            doc_id: doc_id.to_string(),
            title: doc_id.to_string(),
            text: text.to_string(),
        })
    });
    let built = build_index(
        docs.collect::<Vec<_>>(),
        &registry,
        "embedder",
        &BuildParams {
            chunk_size: 120,
            chunk_overlap: 20,
            deterministic: true,
        },
    )
    .unwrap();
    built.save(&index).unwrap();

    let doc = ConfigDoc {
        language: "zh".to_string(),
        seed: 42,
        top_k: 3,
        deterministic: true,
        parallelism: 1,
        index: "index.jsonl".to_string(),
        cache: cache.then(|| "cache.jsonl".to_string()),
        backends: backend_specs(),
    };
    std::fs::write(&config, toml::to_string_pretty(&doc).unwrap()).unwrap();

    Fixture {
        dir: dir.to_path_buf(),
        dataset,
        corpus,
        index,
        config,
    }
}

/// A config whose every stage replays a recorded transcript, for offline
/// reruns of a `--record` run.
pub fn write_replay_config(dir: &Path, transcript: &Path) -> PathBuf {
    let mut backends = BTreeMap::new();
    for stage in Stage::ALL {
        backends.insert(
            stage.name().to_string(),
            BackendSpec::Replay {
                path: transcript.to_path_buf(),
                dim: None,
            },
        );
    }
    let doc = ConfigDoc {
        language: "zh".to_string(),
        seed: 42,
        top_k: 3,
        deterministic: true,
        parallelism: 1,
        index: "index.jsonl".to_string(),
        cache: None,
        backends,
    };
    let path = dir.join("replay_config.toml");
    std::fs::write(&path, toml::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

/// In-process services over the fixture backends and a freshly built
/// index; no cache. Counters start at zero.
pub fn fresh_services() -> Services {
    let mut registry = Registry::new();
    for (id, spec) in backend_specs() {
        registry.register(&id, &spec).unwrap();
    }
    let docs = corpus_docs().into_iter().map(|(doc_id, text)| {
        Ok(CorpusDoc {
            doc_id: doc_id.to_string(),
            title: doc_id.to_string(),
            text: text.to_string(),
        })
    });
    let index = build_index(
        docs.collect::<Vec<_>>(),
        &registry,
        "embedder",
        &BuildParams {
            chunk_size: 120,
            chunk_overlap: 20,
            deterministic: true,
        },
    )
    .unwrap();
    Services {
        registry: Arc::new(registry),
        templates: Arc::new(TemplateSet::defaults()),
        taxonomy: Arc::new(Taxonomy::default_taxonomy()),
        index: Arc::new(index),
        markers: picorag::rewrite::DEFAULT_FORBIDDEN_MARKERS
            .iter()
            .map(|s| s.to_string())
            .collect(),
    }
}

/// The RunConfig matching the fixture config file.
pub fn fixture_run_config() -> RunConfig {
    let backends: BTreeMap<Stage, String> = Stage::ALL
        .into_iter()
        .map(|s| (s, s.name().to_string()))
        .collect();
    RunConfig {
        backends,
        top_k: 3,
        seed: 42,
        deterministic: true,
        ..RunConfig::default()
    }
}

/// Loads the fixture queries as in-memory `UserQuery` values.
pub fn fixture_queries() -> Vec<picorag::types::UserQuery> {
    QUERIES
        .iter()
        .map(|q| {
            picorag::types::UserQuery::new(
                q.id,
                q.question,
                Some(q.gold),
                q.discipline_label,
                None,
            )
            .unwrap()
        })
        .collect()
}

/// 20 chunks fit comfortably; the index must load back identically.
pub fn load_fixture_index(path: &Path) -> VectorIndex {
    VectorIndex::load(path).unwrap()
}

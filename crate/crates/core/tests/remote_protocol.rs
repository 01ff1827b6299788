//! Differential test: the transition model served over the wire protocol
//! must behave identically to in-process calls, including when driving the
//! full pipeline.

use std::io::BufReader;
use std::net::TcpListener;

use stepchain_core::chain::LogicalChain;
use stepchain_core::experience::{ExperienceLibrary, NewExperience};
use stepchain_core::model::{AdaptConfig, AdaptableModel, ModelParams, TraceSample};
use stepchain_core::pipeline::{run_pipeline, ComponentMask, Query};
use stepchain_core::remote::{serve_connection, RemoteModel};
use stepchain_core::skills::{SkillLibrary, SkillRule};
use stepchain_core::EngineConfig;

fn toy_library() -> ExperienceLibrary {
    let mut lib = ExperienceLibrary::new();
    for (id, q, a, c) in [
        ("e1", "What causes A?", "C", "A -> B -> C"),
        ("e2", "What about X?", "Z", "X -> Y -> Z"),
    ] {
        lib.add(NewExperience {
            id: Some(id.into()),
            question: q.into(),
            context: None,
            answer: a.into(),
            chain: LogicalChain::parse(c).unwrap(),
        })
        .unwrap();
    }
    lib
}

fn spawn_server(model: ModelParams<f64>) -> std::net::SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let reader = BufReader::new(stream.try_clone().unwrap());
            let _ = serve_connection(&model, reader, stream);
        }
    });
    addr
}

#[test]
fn remote_model_matches_in_process_calls() {
    let library = toy_library();
    let local: ModelParams<f64> = ModelParams::from_library(&library).unwrap();
    let addr = spawn_server(local.clone());
    let remote = RemoteModel::connect(addr).unwrap();

    let chain = LogicalChain::parse("A -> B -> C").unwrap();
    let local_lp = AdaptableModel::log_prob(&local, "What causes A?", None, &chain).unwrap();
    let remote_lp = remote.log_prob("What causes A?", None, &chain).unwrap();
    assert_eq!(local_lp, remote_lp);

    let batch: Vec<TraceSample> = library.items().map(TraceSample::from).collect();
    let config = AdaptConfig {
        steps: 6,
        eta: 0.2,
        max_states: 12,
    };
    let local_adapted = local.adapt(&batch, &config).unwrap();
    let remote_adapted = remote.adapt(&batch, &config).unwrap();
    assert_eq!(local_adapted.loss_trace, remote_adapted.loss_trace);

    let local_chain = local_adapted
        .model
        .sample("What causes A?", None, &config)
        .unwrap();
    let remote_chain = remote_adapted
        .model
        .sample("What causes A?", None, &config)
        .unwrap();
    assert_eq!(local_chain, remote_chain);

    let local_lp = local_adapted
        .model
        .log_prob("What causes A?", None, &chain)
        .unwrap();
    let remote_lp = remote_adapted
        .model
        .log_prob("What causes A?", None, &chain)
        .unwrap();
    assert_eq!(local_lp, remote_lp);
}

#[test]
fn pipeline_runs_identically_over_the_wire() {
    let library = toy_library();
    let model: ModelParams<f64> = ModelParams::from_library(&library).unwrap();
    let mut skills = SkillLibrary::new();
    skills
        .add(
            SkillRule::parse("note", "A -> B -> C treatment")
                .unwrap()
                .with_id("s1"),
        )
        .unwrap();
    skills.freeze();
    let mut frozen_library = library;
    frozen_library.freeze();
    let config = EngineConfig::default();
    let query = Query::free_text("What causes A?", "");

    let in_process = run_pipeline(
        &query,
        &skills,
        &frozen_library,
        &model,
        None,
        &config,
        ComponentMask::FULL,
    )
    .unwrap();

    let addr = spawn_server(model);
    let remote = RemoteModel::connect(addr).unwrap();
    let over_wire = run_pipeline(
        &query,
        &skills,
        &frozen_library,
        &remote,
        None,
        &config,
        ComponentMask::FULL,
    )
    .unwrap();

    assert_eq!(in_process.without_timings(), over_wire.without_timings());
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "audit.hpp"
#include "support/synth.hpp"
#include "util.hpp"

using namespace memlab;

TEST_CASE("verdict decision rule") {
    const double alpha = 0.05;
    CHECK(audit::decide_verdict(0.4, 1e-6, alpha) == "memorized");
    CHECK(audit::decide_verdict(0.01, 1e-6, alpha) == "not_memorized");
    CHECK(audit::decide_verdict(0.4, 0.2, alpha) == "inconclusive");
    CHECK(audit::decide_verdict(0.01, 0.9, alpha) == "inconclusive");
}

TEST_CASE("run_audit produces a coherent report on a tiny corpus") {
    corpus::BuildOptions opts;
    opts.mode = corpus::TokenMode::Word;
    opts.fractions = {0.7, 0.3, 0.0};
    opts.seed = 2;
    auto c = corpus::build_corpus(synth::plain_corpus(20, 2), opts);

    audit::AuditConfig cfg;
    cfg.proxy_cfg = {2, 2, 32, 64, 64, c.vocab.size(), 1};
    cfg.proxy_train.epochs = 40;
    cfg.proxy_train.lr = 3e-3;
    cfg.proxy_train.batch_size = 4;
    cfg.proxy_train.stream_len = 24;
    cfg.inducer_cfg = {1, 2, 16, 32, 64, c.vocab.size(), 2};
    cfg.icfg.max_it = 1;
    cfg.icfg.finetune_epochs = 1;
    cfg.icfg.top_k = 4;
    cfg.icfg.beams = 2;
    cfg.icfg.max_prompt_len = 2;
    cfg.icfg.lambda = 0.0;
    cfg.trials = 2;
    cfg.alpha = 0.05;
    cfg.seed = 77;

    // suspects: one trained on the same corpus, one untouched
    auto trained = lm::init_model({2, 2, 32, 64, 64, c.vocab.size(), 11});
    lm::CorpusTrainOptions topts = cfg.proxy_train;
    topts.seed = 123;
    lm::train_on_corpus(trained, c, topts);
    auto untrained = lm::init_model({2, 2, 32, 64, 64, c.vocab.size(), 12});

    const auto rep = audit::run_audit(c, cfg, trained, untrained);
    CHECK(rep.proxy.n == c.test.size());
    CHECK(rep.p_trained >= 0.0);
    CHECK(rep.p_trained <= 1.0);
    CHECK(rep.p_untrained >= 0.0);
    CHECK(rep.p_untrained <= 1.0);
    CHECK(rep.verdict ==
          audit::decide_verdict(rep.p_trained, rep.p_untrained, rep.alpha));
    // trained models memorize vastly more than a random-weight model
    CHECK(rep.proxy.mean > rep.suspect_untrained.mean);

    const auto j = rep.to_json();
    CHECK(j.find("\"verdict\"") != std::string::npos);
    CHECK(j.find("\"p_proxy_vs_trained\"") != std::string::npos);
    const auto table = rep.to_table();
    CHECK(table.find("Proxy Mem") != std::string::npos);

    // verdict is a pure function of the three score samples: rerun with the
    // same seeds and compare
    const auto rep2 = audit::run_audit(c, cfg, trained, untrained);
    CHECK(rep2.verdict == rep.verdict);
    CHECK(rep2.p_trained == rep.p_trained);
    CHECK(rep2.p_untrained == rep.p_untrained);
}

TEST_CASE("run_audit rejects undersized splits") {
    corpus::BuildOptions opts;
    opts.mode = corpus::TokenMode::Word;
    opts.fractions = {0.9, 0.1, 0.0};
    opts.seed = 3;
    auto c = corpus::build_corpus(synth::plain_corpus(10, 3), opts);
    REQUIRE(c.test.size() < 2);

    audit::AuditConfig cfg;
    auto m1 = lm::init_model({1, 2, 16, 32, 64, c.vocab.size(), 1});
    auto m2 = lm::init_model({1, 2, 16, 32, 64, c.vocab.size(), 2});
    CHECK_THROWS_AS(audit::run_audit(c, cfg, m1, m2), Error);
}

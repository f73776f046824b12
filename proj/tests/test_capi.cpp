// Exercises the shared-library surface through the public C header only.
#include "memlab.h"

#include "json.hpp"

#include <cassert>
#include <unistd.h>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace {

int g_failures = 0;

#define CHECK_TRUE(cond)                                                    \
    do {                                                                    \
        if (!(cond)) {                                                      \
            std::fprintf(stderr, "FAIL %s:%d: %s\n", __FILE__, __LINE__, #cond); \
            ++g_failures;                                                   \
        }                                                                   \
    } while (0)

#define CHECK_OK(expr)                                                        \
    do {                                                                      \
        memlab_status st_ = (expr);                                           \
        if (st_ != MEMLAB_OK) {                                               \
            std::fprintf(stderr, "FAIL %s:%d: %s -> %s (%s)\n", __FILE__,     \
                         __LINE__, #expr, memlab_status_name(st_),            \
                         memlab_last_error());                                \
            ++g_failures;                                                     \
        }                                                                     \
    } while (0)

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() /
            ("memlab_capi_" + std::to_string(::getpid()) + "_" + name))
        .string();
}

}  // namespace

int main() {
    CHECK_TRUE(std::strlen(memlab_version()) > 0);
    memlab_set_threads(2);

    // metrics and stats through the C surface
    double score = -1.0;
    CHECK_OK(memlab_mem_score("a b c d", "a c d e", &score));
    CHECK_TRUE(score == 0.75);
    size_t lcs = 0;
    CHECK_OK(memlab_lcs_length("a b c d", "a c d e", &lcs));
    CHECK_TRUE(lcs == 3);

    std::vector<double> sa = {0.9, 0.8, 0.85, 0.95};
    std::vector<double> sb = {0.1, 0.2, 0.15, 0.05};
    double z = 0.0, p = -1.0;
    CHECK_OK(memlab_ztest(sa.data(), sa.size(), sb.data(), sb.size(), &z, &p));
    CHECK_TRUE(z > 5.0);
    CHECK_TRUE(p < 1e-6);

    // error path: status code and message
    memlab_status st = memlab_ztest(sa.data(), 1, sb.data(), 1, &z, &p);
    CHECK_TRUE(st == MEMLAB_ERR_INVALID_ARGUMENT);
    CHECK_TRUE(std::strlen(memlab_last_error()) > 0);

    // corpus build from a data file
    const std::string data = temp_path("data.txt");
    {
        std::ofstream out(data);
        out << "bala keto rupa mani\n"
            << "bala keto nopa suri\n"
            << "dola pina vema tuko\n"
            << "dola pina hesa wani\n"
            << "fima zeto qera lopi\n"
            << "fima zeto busa neri\n"
            << "gora habi cusa deli\n"
            << "gora habi jopa kemi\n"
            << "lura mobi nute pori\n"
            << "lura mobi qeva ruki\n";
    }
    memlab_corpus* corpus = nullptr;
    CHECK_OK(memlab_corpus_build(
        data.c_str(),
        "{\"mode\":\"word\",\"fractions\":[0.7,0.3,0.0],\"seed\":3}", &corpus));

    char info[512];
    size_t len = 0;
    CHECK_OK(memlab_corpus_info(corpus, info, sizeof(info), &len));
    CHECK_TRUE(len > 0);
    CHECK_TRUE(std::string(info).find("\"vocab_size\"") != std::string::npos);
    const int vocab_size = nlohmann::json::parse(info)["vocab_size"].get<int>();

    // unknown option keys are rejected
    memlab_corpus* bad = nullptr;
    st = memlab_corpus_build(data.c_str(), "{\"fraction\":[1,0,0]}", &bad);
    CHECK_TRUE(st == MEMLAB_ERR_FORMAT);

    // encode/decode round trip
    int32_t ids[64];
    size_t n_ids = 0;
    CHECK_OK(memlab_corpus_encode(corpus, "bala keto", ids, 64, &n_ids));
    CHECK_TRUE(n_ids == 2);
    char text[128];
    CHECK_OK(memlab_corpus_decode(corpus, ids, n_ids, text, sizeof(text), &len));
    CHECK_TRUE(std::string(text) == "bala keto");

    // save + reopen
    const std::string vocab_path = temp_path("vocab.json");
    const std::string splits_path = temp_path("splits.jsonl");
    CHECK_OK(memlab_corpus_save(corpus, vocab_path.c_str(), splits_path.c_str()));
    memlab_corpus* reopened = nullptr;
    CHECK_OK(memlab_corpus_open(data.c_str(), vocab_path.c_str(), splits_path.c_str(),
                                &reopened));

    // model lifecycle: create, train briefly, save, load, generate
    std::string mcfg = "{\"n_layers\":1,\"n_heads\":2,\"d_model\":16,\"d_ff\":32,"
                       "\"context_len\":64,\"vocab_size\":0,\"seed\":5}";
    memlab_model* model = nullptr;
    st = memlab_model_create(mcfg.c_str(), &model);
    CHECK_TRUE(st == MEMLAB_ERR_INVALID_ARGUMENT);  // vocab_size required

    size_t vpos = mcfg.find("\"vocab_size\":0");
    mcfg.replace(vpos, std::strlen("\"vocab_size\":0"),
                 "\"vocab_size\":" + std::to_string(vocab_size));
    CHECK_OK(memlab_model_create(mcfg.c_str(), &model));

    CHECK_OK(memlab_model_train(model, corpus,
                                "{\"epochs\":8,\"lr\":0.003,\"batch_size\":2,"
                                "\"stream_len\":24,\"seed\":1}"));

    double loss = 0.0;
    CHECK_OK(memlab_model_loss(model, ids, 2, ids, 2, &loss));
    CHECK_TRUE(loss > 0.0);
    double lp = 0.0;
    CHECK_OK(memlab_model_logprob(model, ids, 2, &lp));
    CHECK_TRUE(lp < 0.0);

    int32_t gen[32];
    size_t n_gen = 0;
    CHECK_OK(memlab_model_generate(model, ids, 2,
                                   "{\"max_new_tokens\":4,\"greedy\":true}", gen, 32,
                                   &n_gen));
    CHECK_TRUE(n_gen <= 4);

    const std::string ckpt = temp_path("model.bin");
    CHECK_OK(memlab_model_save(model, ckpt.c_str()));
    memlab_model* loaded = nullptr;
    CHECK_OK(memlab_model_load(ckpt.c_str(), &loaded));
    double loss2 = 0.0;
    CHECK_OK(memlab_model_loss(loaded, ids, 2, ids, 2, &loss2));
    CHECK_TRUE(loss == loss2);

    // inducer training + extraction end to end (tiny settings)
    memlab_model* inducer = nullptr;
    std::string icfg_model = "{\"n_layers\":1,\"n_heads\":2,\"d_model\":16,"
                             "\"d_ff\":32,\"context_len\":64,\"vocab_size\":" +
                             std::to_string(vocab_size) + ",\"seed\":9}";
    CHECK_OK(memlab_model_create(icfg_model.c_str(), &inducer));
    memlab_model* base = nullptr;
    const std::string pool_path = temp_path("pool.jsonl");
    CHECK_OK(memlab_inducer_train(
        inducer, model, corpus, nullptr,
        "{\"max_it\":1,\"finetune_epochs\":1,\"top_k\":4,\"beams\":2,"
        "\"max_prompt_len\":2,\"lambda\":0.05,\"seed\":3,\"split\":\"train\"}",
        pool_path.c_str(), nullptr, &base));
    CHECK_TRUE(base != nullptr);
    CHECK_TRUE(std::filesystem::file_size(pool_path) > 0);

    char result[1024];
    CHECK_OK(memlab_extract(model, inducer, base, corpus,
                            "{\"method\":\"induced\",\"split\":\"test\","
                            "\"trials\":2,\"seed\":1,\"inducer\":{\"top_k\":4,"
                            "\"beams\":2,\"max_prompt_len\":2,\"lambda\":0.05}}",
                            nullptr, result, sizeof(result), &len));
    CHECK_TRUE(std::string(result).find("\"avg_mem\"") != std::string::npos);

    CHECK_OK(memlab_extract(model, nullptr, nullptr, corpus,
                            "{\"method\":\"ps\",\"split\":\"test\"}", nullptr, result,
                            sizeof(result), &len));

    // gcg cold arm over one sample
    CHECK_OK(memlab_gcg(model, nullptr, nullptr, corpus,
                        "{\"arm\":\"cold\",\"split\":\"test\",\"samples\":1,"
                        "\"n_tokens\":2,\"num_steps\":2,\"top_k\":4,\"batch\":4,"
                        "\"seed\":2}",
                        nullptr, result, sizeof(result), &len));
    CHECK_TRUE(std::string(result).find("\"avg_final_loss\"") != std::string::npos);

    // audit over the tiny corpus (proxy/inducer trained internally)
    memlab_model* untrained = nullptr;
    std::string ucfg = "{\"n_layers\":1,\"n_heads\":2,\"d_model\":16,\"d_ff\":32,"
                       "\"context_len\":64,\"vocab_size\":" +
                       std::to_string(vocab_size) + ",\"seed\":31}";
    CHECK_OK(memlab_model_create(ucfg.c_str(), &untrained));
    const std::string report_path = temp_path("audit.json");
    CHECK_OK(memlab_audit(
        corpus, model, untrained, nullptr, nullptr,
        "{\"alpha\":0.05,\"trials\":1,\"eval_split\":\"test\",\"seed\":4,"
        "\"proxy\":{\"n_layers\":1,\"n_heads\":2,\"d_model\":16,\"d_ff\":32,"
        "\"context_len\":64},"
        "\"proxy_train\":{\"epochs\":4,\"lr\":0.003,\"batch_size\":2,"
        "\"stream_len\":24},"
        "\"inducer_model\":{\"n_layers\":1,\"n_heads\":2,\"d_model\":16,"
        "\"d_ff\":32,\"context_len\":64},"
        "\"inducer\":{\"max_it\":1,\"finetune_epochs\":1,\"top_k\":4,\"beams\":2,"
        "\"max_prompt_len\":2,\"lambda\":0.0}}",
        report_path.c_str(), result, sizeof(result), &len));
    CHECK_TRUE(std::string(result).find("\"verdict\"") != std::string::npos);
    CHECK_TRUE(std::filesystem::file_size(report_path) > 0);

    memlab_model_free(untrained);
    memlab_model_free(base);
    memlab_model_free(inducer);
    memlab_model_free(loaded);
    memlab_model_free(model);
    memlab_corpus_free(reopened);
    memlab_corpus_free(corpus);

    for (const auto& f : {data, vocab_path, splits_path, ckpt, pool_path, report_path}) {
        std::error_code ec;
        std::filesystem::remove(f, ec);
    }

    if (g_failures > 0) {
        std::fprintf(stderr, "%d C API check(s) failed\n", g_failures);
        return 1;
    }
    std::printf("C API checks passed\n");
    return 0;
}

#include "checkpoint.hpp"

#include <cstring>

#include "json.hpp"

namespace memlab::lm {

using json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[8] = {'M', 'E', 'M', 'L', 'A', 'B', 'M', '1'};
constexpr uint32_t kVersion = 1;

// allocates a model with the config's shapes, no RNG involved
Model allocate(const ModelConfig& cfg) {
    Model m;
    m.cfg = cfg;
    const int C = cfg.d_model, F = cfg.d_ff, V = cfg.vocab_size;
    m.wte = Mat::Zero(V, C);
    m.wpe = Mat::Zero(cfg.context_len, C);
    m.blocks.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& b : m.blocks) {
        b.ln1_gain = Mat::Zero(1, C);
        b.wq = Mat::Zero(C, C);
        b.wk = Mat::Zero(C, C);
        b.wv = Mat::Zero(C, C);
        b.wo = Mat::Zero(C, C);
        b.ln2_gain = Mat::Zero(1, C);
        b.w1 = Mat::Zero(F, C);
        b.w2 = Mat::Zero(C, F);
    }
    m.lnf_gain = Mat::Zero(1, C);
    m.wout = Mat::Zero(V, C);
    return m;
}

json tensor_manifest(std::vector<TensorRef> refs) {
    json arr = json::array();
    for (const auto& r : refs) {
        arr.push_back({{"name", r.name},
                       {"rows", r.tensor->rows()},
                       {"cols", r.tensor->cols()}});
    }
    return arr;
}

void append_tensors(std::string& out, std::vector<TensorRef> refs) {
    for (const auto& r : refs) {
        const char* data = reinterpret_cast<const char*>(r.tensor->data());
        out.append(data, sizeof(double) * static_cast<size_t>(r.tensor->size()));
    }
}

void read_tensors(const std::string& blob, size_t& offset, std::vector<TensorRef> refs,
                  const json& manifest) {
    if (manifest.size() != refs.size()) {
        fail(Errc::format, "checkpoint tensor manifest size mismatch");
    }
    for (size_t i = 0; i < refs.size(); ++i) {
        const auto& entry = manifest[i];
        if (entry["name"].get<std::string>() != refs[i].name ||
            entry["rows"].get<Eigen::Index>() != refs[i].tensor->rows() ||
            entry["cols"].get<Eigen::Index>() != refs[i].tensor->cols()) {
            fail(Errc::format, "checkpoint tensor '" + refs[i].name +
                                   "' does not match header shape");
        }
        const size_t bytes = sizeof(double) * static_cast<size_t>(refs[i].tensor->size());
        if (offset + bytes > blob.size()) fail(Errc::format, "checkpoint truncated");
        std::memcpy(refs[i].tensor->data(), blob.data() + offset, bytes);
        offset += bytes;
    }
}

}  // namespace

void save_model(const Model& m, const std::string& path) {
    auto& mm = const_cast<Model&>(m);
    json header;
    header["format_version"] = kVersion;
    header["config"] = json::parse(m.cfg.to_json());
    header["tensors"] = tensor_manifest(base_tensors(mm));
    if (m.adapters) {
        header["adapters"] = {{"rank", m.adapters->rank},
                              {"alpha", m.adapters->alpha},
                              {"tensors", tensor_manifest(adapter_tensors(mm))}};
    } else {
        header["adapters"] = nullptr;
    }
    const std::string hjson = header.dump();

    std::string out;
    out.append(kMagic, sizeof(kMagic));
    uint32_t version = kVersion;
    uint32_t hlen = static_cast<uint32_t>(hjson.size());
    out.append(reinterpret_cast<const char*>(&version), 4);
    out.append(reinterpret_cast<const char*>(&hlen), 4);
    out += hjson;
    append_tensors(out, base_tensors(mm));
    if (m.adapters) append_tensors(out, adapter_tensors(mm));
    write_file_atomic(path, out);
}

Model load_model(const std::string& path) {
    const std::string blob = read_file(path);
    if (blob.size() < sizeof(kMagic) + 8 ||
        std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0) {
        fail(Errc::format, "not a model checkpoint: " + path);
    }
    uint32_t version = 0, hlen = 0;
    std::memcpy(&version, blob.data() + 8, 4);
    std::memcpy(&hlen, blob.data() + 12, 4);
    if (version != kVersion) fail(Errc::format, "unsupported checkpoint version");
    if (blob.size() < 16 + static_cast<size_t>(hlen)) fail(Errc::format, "checkpoint truncated");

    json header = json::parse(blob.substr(16, hlen), nullptr, false);
    if (header.is_discarded()) fail(Errc::format, "bad checkpoint header");
    ModelConfig cfg = ModelConfig::from_json(header["config"].dump());

    Model m = allocate(cfg);
    size_t offset = 16 + static_cast<size_t>(hlen);
    read_tensors(blob, offset, base_tensors(m), header["tensors"]);
    if (!header["adapters"].is_null()) {
        const auto& aj = header["adapters"];
        attach_adapters(m, aj["rank"].get<int>(), aj["alpha"].get<double>(), 0);
        read_tensors(blob, offset, adapter_tensors(m), aj["tensors"]);
    }
    if (offset != blob.size()) fail(Errc::format, "checkpoint has trailing bytes");
    return m;
}

}  // namespace memlab::lm

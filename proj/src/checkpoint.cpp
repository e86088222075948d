#include "psvit/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "psvit/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint i/o assumes a little-endian host");

namespace psvit {

using model::ModelConfig;

namespace {

bool same_config(const ModelConfig& a, const ModelConfig& b) {
    return a.image == b.image && a.channels == b.channels && a.patch == b.patch &&
           a.dim == b.dim && a.heads == b.heads && a.head_dim == b.head_dim && a.ffn == b.ffn &&
           a.layers == b.layers && a.local_blocks == b.local_blocks &&
           a.registers == b.registers && a.t_max == b.t_max && a.scheme == b.scheme &&
           a.pos == b.pos;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParamStoreT<float>& ps) {
    auto schema = model::param_shapes(cfg);
    if (ps.size() != schema.size())
        throw DataError("save_checkpoint: store has " + std::to_string(ps.size()) +
                        " tensors, config wants " + std::to_string(schema.size()));
    std::int64_t total = 0;
    for (size_t i = 0; i < schema.size(); ++i) {
        if (ps.names[i] != schema[i].first || ps.tensors[i].shape() != schema[i].second)
            throw DataError("save_checkpoint: parameter " + std::to_string(i) +
                            " does not match the schema (" + schema[i].first + ")");
        total += ps.tensors[i].numel();
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("save_checkpoint: cannot open " + path);
    os << "psvit-ckpt 1\n";
    os << "image " << cfg.image << "\n";
    os << "channels " << cfg.channels << "\n";
    os << "patch " << cfg.patch << "\n";
    os << "dim " << cfg.dim << "\n";
    os << "heads " << cfg.heads << "\n";
    os << "head_dim " << cfg.head_dim << "\n";
    os << "ffn " << cfg.ffn << "\n";
    os << "layers " << cfg.layers << "\n";
    os << "local_blocks " << cfg.local_blocks << "\n";
    os << "registers " << cfg.registers << "\n";
    os << "t_max " << cfg.t_max << "\n";
    os << "scheme " << model::scheme_name(cfg.scheme) << "\n";
    os << "pos " << model::pos_name(cfg.pos) << "\n";
    os << "params " << schema.size() << " " << total << "\n";
    os << "payload\n";
    for (const auto& t : ps.tensors)
        os.write(reinterpret_cast<const char*>(t.values().data()),
                 std::streamsize(t.values().size() * sizeof(float)));
    if (!os) throw DataError("save_checkpoint: short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("load_checkpoint: cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line != "psvit-ckpt 1")
        throw DataError("load_checkpoint: " + path + " is not a checkpoint file");

    ModelConfig cfg;
    std::int64_t want_tensors = -1, want_total = -1;
    bool in_payload = false;
    while (std::getline(is, line)) {
        if (line == "payload") {
            in_payload = true;
            break;
        }
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "image") ls >> cfg.image;
        else if (key == "channels") ls >> cfg.channels;
        else if (key == "patch") ls >> cfg.patch;
        else if (key == "dim") ls >> cfg.dim;
        else if (key == "heads") ls >> cfg.heads;
        else if (key == "head_dim") ls >> cfg.head_dim;
        else if (key == "ffn") ls >> cfg.ffn;
        else if (key == "layers") ls >> cfg.layers;
        else if (key == "local_blocks") ls >> cfg.local_blocks;
        else if (key == "registers") ls >> cfg.registers;
        else if (key == "t_max") ls >> cfg.t_max;
        else if (key == "scheme") {
            std::string v;
            ls >> v;
            cfg.scheme = model::scheme_from(v);
        } else if (key == "pos") {
            std::string v;
            ls >> v;
            cfg.pos = model::pos_from(v);
        } else if (key == "params") {
            ls >> want_tensors >> want_total;
        } else {
            throw DataError("load_checkpoint: unknown header key '" + key + "' in " + path);
        }
        if (!ls) throw DataError("load_checkpoint: bad header line '" + line + "' in " + path);
    }
    if (!in_payload) throw DataError("load_checkpoint: no payload marker in " + path);
    try {
        cfg.validate();
    } catch (const ValueError& e) {
        throw DataError("load_checkpoint: embedded config invalid: " + std::string(e.what()));
    }

    auto schema = model::param_shapes(cfg);
    std::int64_t total = 0;
    for (const auto& [name, shape] : schema) total += shape_numel(shape);
    if (want_tensors != std::int64_t(schema.size()) || want_total != total)
        throw DataError("load_checkpoint: params line disagrees with the config schema");

    Checkpoint ck;
    ck.config = cfg;
    for (const auto& [name, shape] : schema) {
        std::vector<float> v(size_t(shape_numel(shape)));
        is.read(reinterpret_cast<char*>(v.data()), std::streamsize(v.size() * sizeof(float)));
        if (!is) throw DataError("load_checkpoint: truncated payload in " + path);
        ck.params.add(name, TensorT<float>::from(shape, std::move(v), true));
    }
    char probe;
    if (is.read(&probe, 1)) throw DataError("load_checkpoint: trailing bytes in " + path);
    return ck;
}

Checkpoint load_checkpoint(const std::string& path, const ModelConfig& want) {
    auto ck = load_checkpoint(path);
    if (!same_config(ck.config, want))
        throw DataError("load_checkpoint: checkpoint config does not match the requested one");
    return ck;
}

}  // namespace psvit

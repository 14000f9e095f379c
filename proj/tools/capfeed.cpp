#include "capfeed/continual.hpp"
#include "capfeed/errors.hpp"
#include "capfeed/image_augment.hpp"
#include "capfeed/image_io.hpp"
#include "capfeed/joint_augment.hpp"
#include "capfeed/metrics.hpp"
#include "capfeed/service.hpp"
#include "capfeed/sim_user.hpp"
#include "capfeed/synthetic.hpp"
#include "capfeed/task_splitter.hpp"
#include "capfeed/text_augment.hpp"

#include "CLI11.hpp"
#include "httplib.h"

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <unordered_map>

using namespace capfeed;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path.string());
    return json::parse(in);
}

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

LoadResult load_data(const fs::path& dir, const std::string& split) {
    auto data = load_dataset(dir);
    if (split.empty()) return data;
    LoadResult out;
    std::set<std::string> keep;
    for (auto& img : data.images)
        if (img.split_tag == split) {
            keep.insert(img.image_id);
            out.images.push_back(std::move(img));
        }
    for (auto& c : data.captions)
        if (keep.count(c.image_id)) out.captions.push_back(std::move(c));
    return out;
}

const ImageRecord& find_image(const LoadResult& data, const std::string& id) {
    for (const auto& img : data.images)
        if (img.image_id == id) return img;
    throw std::invalid_argument("image " + id + " not in dataset");
}

ImageLookup lookup_for(const std::unordered_map<std::string, ImageRecord>& store) {
    return [&store](const std::string& id) -> const ImageRecord* {
        const auto it = store.find(id);
        return it == store.end() ? nullptr : &it->second;
    };
}

struct UpdateFlags {
    std::size_t batch_size = 8;
    double lr = 0.01;
    int epochs = 1;
    int replay_every = 10;
    std::size_t replay_batch = 8;
    std::uint64_t seed = 0;

    void add(CLI::App* app) {
        app->add_option("--batch-size", batch_size, "Instances per batch");
        app->add_option("--lr", lr, "Learning rate");
        app->add_option("--epochs", epochs, "Passes over the new instances");
        app->add_option("--replay-every", replay_every, "New batches per replayed memory batch (0 disables)");
        app->add_option("--replay-batch", replay_batch, "Memory batch size");
        app->add_option("--seed", seed, "Shuffle seed");
    }
    UpdateConfig config() const {
        UpdateConfig c;
        c.batch_size = batch_size;
        c.lr = lr;
        c.epochs = epochs;
        c.replay_every = replay_every;
        c.replay_batch_size = replay_batch;
        c.seed = seed;
        return c;
    }
};

std::atomic<httplib::Server*> g_server{nullptr};

void handle_signal(int) {
    if (auto* s = g_server.load()) s->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"capfeed: interactive image-captioning adaptation"};
    app.require_subcommand(1);

    // data load
    auto* data_cmd = app.add_subcommand("data", "Dataset utilities");
    data_cmd->require_subcommand(1);
    auto* load_cmd = data_cmd->add_subcommand("load", "Convert COCO or VizWiz annotations to a dataset directory");
    std::string format = "coco", annotations, split_file, image_root, out_dir;
    load_cmd->add_option("--format", format, "coco | vizwiz")->check(CLI::IsMember({"coco", "vizwiz"}));
    load_cmd->add_option("--annotations", annotations, "COCO caption JSON or VizWiz annotation directory")->required();
    load_cmd->add_option("--splits", split_file, "Split file (COCO)");
    load_cmd->add_option("--image-root", image_root, "Directory image files are resolved against");
    load_cmd->add_option("--out", out_dir, "Output dataset directory")->required();

    // synth
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic-shapes dataset directory");
    std::string shapes = "circle,square,triangle,star", colors = "red,green,blue,yellow", synth_prefix = "shape";
    int per_combination = 4, captions_per_image = 1, image_size = 64;
    std::uint64_t synth_seed = 0;
    synth_cmd->add_option("--out", out_dir, "Output dataset directory")->required();
    synth_cmd->add_option("--shapes", shapes, "Comma-separated shapes");
    synth_cmd->add_option("--colors", colors, "Comma-separated colors");
    synth_cmd->add_option("--per", per_combination, "Images per (shape, color)");
    synth_cmd->add_option("--captions", captions_per_image, "Captions per image (1-5)");
    synth_cmd->add_option("--size", image_size, "Image side in pixels");
    synth_cmd->add_option("--prefix", synth_prefix, "Image id prefix");
    synth_cmd->add_option("--seed", synth_seed, "Seed");

    // pretrain
    auto* pre_cmd = app.add_subcommand("pretrain", "Train a captioner from scratch on a dataset");
    std::string data_dir, checkpoint, out_path, model_config, memory_out, split_tag = "train";
    int min_freq = 1;
    std::size_t capacity = 1000;
    UpdateFlags pre_flags;
    pre_flags.epochs = 50;
    pre_flags.replay_every = 0;
    pre_cmd->add_option("--data", data_dir, "Dataset directory")->required();
    pre_cmd->add_option("--out", out_path, "Checkpoint to write")->required();
    pre_cmd->add_option("--model-config", model_config, "Captioner config JSON");
    pre_cmd->add_option("--min-freq", min_freq, "Vocabulary frequency cutoff");
    pre_cmd->add_option("--split", split_tag, "Split tag to train on (empty for all)");
    pre_cmd->add_option("--memory-out", memory_out, "Also write the replay memory filled during training");
    pre_cmd->add_option("--capacity", capacity, "Replay memory capacity");
    pre_flags.add(pre_cmd);

    // augment
    auto* aug_cmd = app.add_subcommand("augment", "Run an augmentation and print the result");
    aug_cmd->require_subcommand(1);
    auto* aug_text = aug_cmd->add_subcommand("text", "Text variants of one caption");
    std::string caption_text, lexicon_path, stub_path, backend_url, pivots = "ar,es";
    TextAugmentConfig text_cfg;
    aug_text->add_option("--caption", caption_text, "Caption text")->required();
    aug_text->add_option("--lexicon", lexicon_path, "Synonym lexicon JSON");
    aug_text->add_option("--stub", stub_path, "Stub backend table JSON");
    aug_text->add_option("--backend", backend_url, "LibreTranslate-compatible backend URL");
    aug_text->add_option("--rate", text_cfg.synonym_rate, "Synonym substitution rate");
    aug_text->add_option("--n-synonym", text_cfg.n_synonym, "Synonym variants");
    aug_text->add_option("--pivots", pivots, "Comma-separated pivot languages");
    aug_text->add_option("--n-paraphrase", text_cfg.n_paraphrase, "Paraphrase variants");
    aug_text->add_option("--seed", text_cfg.seed, "Seed");

    auto* aug_image = aug_cmd->add_subcommand("image", "Image variants with remapped boxes");
    std::string image_id, dst_id;
    int k = 3, box_index = 0;
    std::uint64_t aug_seed = 0;
    aug_image->add_option("--data", data_dir, "Dataset directory")->required();
    aug_image->add_option("--image-id", image_id, "Image id")->required();
    aug_image->add_option("--k", k, "Number of variants");
    aug_image->add_option("--seed", aug_seed, "Seed");
    aug_image->add_option("--out", out_dir, "Directory for the variant PPM files")->required();

    auto* aug_joint = aug_cmd->add_subcommand("joint", "CutMix an object from one image into another");
    std::string dst_caption;
    aug_joint->add_option("--data", data_dir, "Dataset directory")->required();
    aug_joint->add_option("--src", image_id, "Source image id")->required();
    aug_joint->add_option("--box", box_index, "Index of the source box");
    aug_joint->add_option("--dst", dst_id, "Destination image id")->required();
    aug_joint->add_option("--caption", dst_caption, "Destination caption (default: its first caption)");
    aug_joint->add_option("--seed", aug_seed, "Placement seed");
    aug_joint->add_option("--out", out_dir, "Directory for the output PPM")->required();

    // split
    auto* split_cmd = app.add_subcommand("split", "Concept-based task splits");
    std::string embeddings, splits_path;
    int n_splits = 2;
    std::uint64_t split_seed = 0;
    split_cmd->add_option("--data", data_dir, "Dataset directory")->required();
    split_cmd->add_option("--embeddings", embeddings, "Word-vector text file")->required();
    split_cmd->add_option("--k", n_splits, "Number of splits");
    split_cmd->add_option("--seed", split_seed, "Seed");
    split_cmd->add_option("--out", splits_path, "splits.json to write")->required();

    // update
    auto* upd_cmd = app.add_subcommand("update", "One step-wise update on a dataset's captions");
    std::string memory_path;
    UpdateFlags upd_flags;
    upd_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    upd_cmd->add_option("--data", data_dir, "Dataset directory with the new instances")->required();
    upd_cmd->add_option("--memory", memory_path, "Replay memory JSONL (read if present, then written)");
    upd_cmd->add_option("--capacity", capacity, "Capacity of a new memory");
    upd_cmd->add_option("--out", out_path, "Checkpoint to write")->required();
    upd_cmd->add_option("--split", split_tag, "Split tag to train on (empty for all)");
    upd_flags.add(upd_cmd);

    // train-disjoint
    auto* td_cmd = app.add_subcommand("train-disjoint", "Sequential training over task splits with the R matrix");
    std::string eval_split = "";
    UpdateFlags td_flags;
    td_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    td_cmd->add_option("--data", data_dir, "Dataset directory")->required();
    td_cmd->add_option("--splits", splits_path, "splits.json")->required();
    td_cmd->add_option("--capacity", capacity, "Replay memory capacity");
    td_cmd->add_option("--out", out_path, "Final checkpoint to write");
    td_flags.add(td_cmd);

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Corpus BLEU-4 of a checkpoint on a dataset");
    int max_len = 16;
    eval_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    eval_cmd->add_option("--data", data_dir, "Dataset directory")->required();
    eval_cmd->add_option("--split", eval_split, "Split tag (empty for all)");
    eval_cmd->add_option("--max-len", max_len, "Maximum caption length");

    // serve
    auto* serve_cmd = app.add_subcommand("serve", "Run the feedback service");
    std::string config_path, host, port_file;
    int port = -1;
    serve_cmd->add_option("--config", config_path, "Service config JSON");
    serve_cmd->add_option("--host", host, "Listen address");
    serve_cmd->add_option("--port", port, "Listen port (0 picks a free port)");
    serve_cmd->add_option("--port-file", port_file, "Write the bound port to this file");

    // simulate
    auto* sim_cmd = app.add_subcommand("simulate", "Drive the service with a simulated user");
    std::string endpoint, transcript_path;
    SimOptions sim;
    sim_cmd->add_option("--data", data_dir, "Dataset directory with ground-truth captions")->required();
    sim_cmd->add_option("--endpoint", endpoint, "Service base URL")->required();
    sim_cmd->add_option("--rounds", sim.rounds, "Rounds (one image each)")->required();
    sim_cmd->add_option("--update-every", sim.update_every, "Rounds between POST /update (0 never)");
    sim_cmd->add_option("--seed", sim.seed, "Image order seed");
    sim_cmd->add_option("--threshold", sim.threshold, "Jaccard threshold for a good rating");
    sim_cmd->add_flag("--ranks", sim.use_ranks, "Submit ranks instead of good/bad");
    sim_cmd->add_flag("--parallel", sim.parallel, "Issue all predicts concurrently first");
    sim_cmd->add_flag("!--no-bbox", sim.post_bboxes, "Do not post dataset boxes as bbox feedback");
    sim_cmd->add_option("--wait-ms", sim.wait_ms, "Wait for pending augmentations");
    sim_cmd->add_option("--transcript", transcript_path, "Transcript JSONL to write");

    CLI11_PARSE(app, argc, argv);

    try {
        if (load_cmd->parsed()) {
            LoadOptions opts;
            if (!image_root.empty()) opts.image_root = fs::path(image_root);
            auto result = format == "coco"
                              ? load_coco(annotations, split_file.empty() ? std::nullopt : std::optional<fs::path>(split_file), opts)
                              : load_vizwiz(annotations, opts);
            save_dataset(out_dir, result.images, result.captions);
            for (const auto& e : result.errors) std::cerr << "warning: " << e << "\n";
            print({{"images", result.images.size()}, {"captions", result.captions.size()}, {"errors", result.errors.size()}});
        } else if (synth_cmd->parsed()) {
            SyntheticOptions opts;
            opts.image_size = image_size;
            opts.captions_per_image = captions_per_image;
            const auto d = make_shapes_dataset(split_csv(shapes), split_csv(colors), per_combination, synth_seed,
                                               synth_prefix, opts);
            save_dataset(out_dir, d.images, d.captions);
            print({{"images", d.images.size()}, {"captions", d.captions.size()}});
        } else if (pre_cmd->parsed()) {
            const auto data = load_data(data_dir, split_tag);
            const auto cfg = model_config.empty() ? CaptionerConfig{} : CaptionerConfig::from_json(read_json(model_config));
            Captioner model(cfg, build_vocab(data.captions, min_freq), pre_flags.seed);
            std::unordered_map<std::string, ImageRecord> store;
            for (const auto& img : data.images) store.emplace(img.image_id, img);
            ReplayMemory mem(capacity, pre_flags.seed);
            const auto instances = instances_for(data.images, data.captions);
            const auto report = update(model, instances, mem, lookup_for(store), pre_flags.config());
            model.save(out_path);
            if (!memory_out.empty()) mem.save(memory_out);
            print({{"report", report.to_json()}, {"vocab_size", model.vocabulary().size()}, {"checkpoint", out_path}});
        } else if (aug_text->parsed()) {
            SynonymLexicon lexicon;
            if (!lexicon_path.empty()) lexicon = SynonymLexicon::from_file(lexicon_path);
            std::unique_ptr<TextBackend> backend;
            if (!backend_url.empty())
                backend = std::make_unique<HttpTextBackend>(backend_url);
            else if (!stub_path.empty())
                backend = std::make_unique<StubTextBackend>(StubTextBackend::from_file(stub_path));
            else
                backend = std::make_unique<StubTextBackend>();
            text_cfg.pivots = split_csv(pivots);
            const auto caption = make_caption("input", "input", caption_text, Provenance::corrected);
            const auto set = augment_caption(caption, text_cfg, lexicon, *backend);
            json vars = json::array();
            for (const auto& v : set.variants) vars.push_back(to_json(v));
            print({{"original", to_json(set.original)}, {"variants", vars}});
        } else if (aug_image->parsed()) {
            const auto data = load_dataset(data_dir);
            const auto outputs = augment_image_traced(find_image(data, image_id), k, aug_seed);
            fs::create_directories(out_dir);
            json out = json::array();
            for (const auto& a : outputs) {
                const auto file = fs::path(out_dir) / (a.image.image_id + ".ppm");
                write_ppm(file, a.image.width, a.image.height, *a.image.pixels());
                json boxes = json::array();
                for (const auto& b : a.image.bboxes) boxes.push_back(to_json(b));
                out.push_back({{"image_id", a.image.image_id}, {"transform", a.transform.to_json()}, {"path", file.string()},
                               {"width", a.image.width}, {"height", a.image.height}, {"bboxes", boxes}});
            }
            print(out);
        } else if (aug_joint->parsed()) {
            const auto data = load_dataset(data_dir);
            const auto& src = find_image(data, image_id);
            const auto& dst = find_image(data, dst_id);
            if (box_index < 0 || box_index >= static_cast<int>(src.bboxes.size()))
                throw std::invalid_argument("source image has no box " + std::to_string(box_index));
            CaptionRecord cap;
            if (!dst_caption.empty()) {
                cap = make_caption(dst_id + "#cap", dst_id, dst_caption);
            } else {
                const auto by_image = captions_by_image(data.captions);
                const auto it = by_image.find(dst_id);
                if (it == by_image.end()) throw std::invalid_argument("destination image has no caption; pass --caption");
                cap = it->second.front();
            }
            const auto [img, caption] = cutmix_joint(src, src.bboxes[static_cast<std::size_t>(box_index)], dst, cap, aug_seed);
            fs::create_directories(out_dir);
            const auto file = fs::path(out_dir) / (img.image_id + ".ppm");
            write_ppm(file, img.width, img.height, *img.pixels());
            json boxes = json::array();
            for (const auto& b : img.bboxes) boxes.push_back(to_json(b));
            print({{"image_id", img.image_id}, {"path", file.string()}, {"bboxes", boxes}, {"caption", to_json(caption)}});
        } else if (split_cmd->parsed()) {
            LoadOptions opts;
            opts.pixels = PixelMode::lazy;
            const auto data = load_dataset(data_dir, opts);
            const auto result = assign_splits(data.images, data.captions, n_splits, split_seed, EmbeddingTable::load(embeddings));
            save_splits(splits_path, result.splits);
            json clusters = json::array();
            for (const auto& c : result.clusters) clusters.push_back({{"cluster_id", c.cluster_id}, {"member_nps", c.member_nps}});
            json sizes = json::array();
            for (const auto& s : result.splits) sizes.push_back(s.image_ids.size());
            print({{"splits", sizes}, {"clusters", clusters}, {"unembedded_nps", result.unembedded_nps}});
        } else if (upd_cmd->parsed()) {
            auto model = Captioner::load(checkpoint);
            const auto data = load_data(data_dir, split_tag);
            std::unordered_map<std::string, ImageRecord> store;
            for (const auto& img : data.images) store.emplace(img.image_id, img);
            ReplayMemory mem = !memory_path.empty() && fs::exists(memory_path) ? ReplayMemory::load(memory_path)
                                                                                 : ReplayMemory(capacity, upd_flags.seed);
            for (const auto& e : mem.entries())
                if (!store.count(e.image_id))
                    throw std::runtime_error("memory references image " + e.image_id + " missing from --data");
            const auto instances = instances_for(data.images, data.captions);
            const auto report = update(model, instances, mem, lookup_for(store), upd_flags.config());
            model.save(out_path);
            if (!memory_path.empty()) mem.save(memory_path);
            print(report.to_json());
        } else if (td_cmd->parsed()) {
            auto model = Captioner::load(checkpoint);
            const auto data = load_dataset(data_dir);
            std::unordered_map<std::string, ImageRecord> store;
            for (const auto& img : data.images) store.emplace(img.image_id, img);
            const auto by_image = captions_by_image(data.captions);
            std::vector<TaskData> tasks;
            for (const auto& split : load_splits(splits_path)) {
                TaskData t;
                t.split_id = split.split_id;
                std::vector<ImageRecord> imgs;
                std::vector<CaptionRecord> caps;
                for (const auto& id : split.image_ids) {
                    const auto it = store.find(id);
                    if (it == store.end()) throw std::invalid_argument("split image " + id + " not in dataset");
                    imgs.push_back(it->second);
                    if (const auto c = by_image.find(id); c != by_image.end())
                        caps.insert(caps.end(), c->second.begin(), c->second.end());
                }
                t.train = instances_for(imgs, caps);
                t.eval = make_eval_set(imgs, caps);
                tasks.push_back(std::move(t));
            }
            ReplayMemory mem(capacity, td_flags.seed);
            const auto result = train_disjoint(model, tasks, mem, lookup_for(store), td_flags.config());
            json R = json::array();
            for (Eigen::Index i = 0; i < result.R.rows(); ++i) {
                json row = json::array();
                for (Eigen::Index j = 0; j < result.R.cols(); ++j)
                    row.push_back(std::isnan(result.R(i, j)) ? json() : json(result.R(i, j)));
                R.push_back(row);
            }
            json forget = json::array();
            for (Eigen::Index j = 0; j + 1 < result.R.rows(); ++j) forget.push_back(forgetting(result.R, static_cast<int>(j)));
            json reports = json::array();
            for (const auto& r : result.reports) reports.push_back(r.to_json());
            if (!out_path.empty()) model.save(out_path);
            print({{"R", R}, {"forgetting", forget}, {"reports", reports}});
        } else if (eval_cmd->parsed()) {
            const auto model = Captioner::load(checkpoint);
            const auto data = load_data(data_dir, eval_split);
            const auto items = make_eval_set(data.images, data.captions);
            print(evaluate(model, items, max_len).to_json());
        } else if (serve_cmd->parsed()) {
            auto cfg = load_service_config(config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path),
                                           [](const char* name) { return std::getenv(name); });
            if (!host.empty()) cfg.host = host;
            if (port >= 0) cfg.port = port;
            FeedbackService service(cfg);
            httplib::Server server;
            register_routes(server, service);
            int bound = cfg.port;
            if (cfg.port == 0) {
                bound = server.bind_to_any_port(cfg.host);
            } else if (!server.bind_to_port(cfg.host, cfg.port)) {
                bound = -1;
            }
            if (bound < 0) throw std::runtime_error("cannot bind " + cfg.host + ":" + std::to_string(cfg.port));
            if (!port_file.empty()) {
                const auto tmp = port_file + ".tmp";
                std::ofstream(tmp) << bound << "\n";
                fs::rename(tmp, port_file);
            }
            std::cerr << "capfeed serving on http://" << cfg.host << ":" << bound << "\n";
            g_server = &server;
            std::signal(SIGINT, handle_signal);
            std::signal(SIGTERM, handle_signal);
            server.listen_after_bind();
            g_server = nullptr;
        } else if (sim_cmd->parsed()) {
            const auto data = load_dataset(data_dir);
            const auto transcript = run_loop(data.images, data.captions, endpoint, sim);
            if (!transcript_path.empty()) write_transcript(transcript_path, transcript);
            int updates = 0, failures = 0;
            for (const auto& e : transcript) {
                updates += e["call"] == "update";
                failures += !(e["status"].is_number() && e["status"].get<int>() == 200);
            }
            print({{"calls", transcript.size()}, {"updates", updates}, {"failed_calls", failures}});
            return failures == 0 ? 0 : 3;
        }
    } catch (const std::exception& e) {
        std::cerr << "capfeed: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

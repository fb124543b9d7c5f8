#ifndef MEGAN_MODEL_HPP
#define MEGAN_MODEL_HPP

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "megan/blocks.hpp"
#include "megan/lmga.hpp"
#include "megan/tensor.hpp"

namespace megan {

/// Architecture hyperparameters. The desk default keeps the full topology at
/// a size where 64-bit gradient checks and single-clip overfits are cheap.
struct MeganConfig {
    int channels = 16;  // feature width C
    int m1 = 3;         // extractor conv layers
    int m2 = 1;         // PFRDB count
    int m3 = 2;         // ResBlock count
    int tau = 2;        // global pool size
    int k_layers = 2;   // GCN layers
    int scale = 4;      // fixed: two x2 pixel-shuffle stages
    int n_pairs = 3;    // n: input frames = n+1, output frames = 2n+1
    bool nonlocal_enabled = true;
    bool lmga_enabled = true;
    bool modulated = false;
    NonLocalNorm nonlocal_norm = NonLocalNorm::softmax;
    GcnMessage gcn_message = GcnMessage::neighbor;

    int in_frames() const { return n_pairs + 1; }
    int out_frames() const { return 2 * n_pairs + 1; }
    void validate() const;
};

struct ConvWB {
    Tensor w, b;
};

struct ExtractorParams {
    Tensor shallow_w, shallow_b;        // 3 -> C
    std::optional<NonLocalParams> nl;   // absent in the w/o-NLRB topology
    std::vector<ConvWB> convs;          // m1 convs C -> C with LeakyReLU
};

/// Every learnable tensor in the network. Names enumerate deterministically
/// through for_each; the checkpoint format and the optimizer both key off
/// that order.
struct MeganParams {
    ExtractorParams extract;
    InterpParams interp;
    BidirParams bidir;
    std::optional<GcnParams> gcn;        // absent in the w/o-LMGA topology
    std::optional<EdgeNetParams> edge;
    std::vector<PfrdbParams> pfrdbs;
    std::vector<ResBlockParams> resblocks;
    Tensor up1_w, up1_b;  // C -> 4C, then pixel shuffle x2
    Tensor up2_w, up2_b;  // C -> 4C, then pixel shuffle x2
    Tensor out_w, out_b;  // C -> 3

    static MeganParams create(const MeganConfig& cfg);
    static MeganParams init(const MeganConfig& cfg, uint64_t seed);

    template <class F>
    void for_each(F&& f) {
        f("extract.shallow.w", extract.shallow_w);
        f("extract.shallow.b", extract.shallow_b);
        if (extract.nl)
            extract.nl->for_each([&](const std::string& n, Tensor& t) { f("extract.nl." + n, t); });
        for (size_t i = 0; i < extract.convs.size(); ++i) {
            f("extract.conv" + std::to_string(i + 1) + ".w", extract.convs[i].w);
            f("extract.conv" + std::to_string(i + 1) + ".b", extract.convs[i].b);
        }
        interp.for_each([&](const std::string& n, Tensor& t) { f("interp." + n, t); });
        bidir.for_each([&](const std::string& n, Tensor& t) { f("bidir." + n, t); });
        if (gcn) gcn->for_each([&](const std::string& n, Tensor& t) { f("lmga.gcn." + n, t); });
        if (edge) edge->for_each([&](const std::string& n, Tensor& t) { f("lmga.edge." + n, t); });
        for (size_t i = 0; i < pfrdbs.size(); ++i)
            pfrdbs[i].for_each([&](const std::string& n, Tensor& t) {
                f("recon.pfrdb" + std::to_string(i + 1) + "." + n, t);
            });
        for (size_t i = 0; i < resblocks.size(); ++i)
            resblocks[i].for_each([&](const std::string& n, Tensor& t) {
                f("recon.res" + std::to_string(i + 1) + "." + n, t);
            });
        f("recon.up1.w", up1_w);
        f("recon.up1.b", up1_b);
        f("recon.up2.w", up2_w);
        f("recon.up2.b", up2_b);
        f("recon.out.w", out_w);
        f("recon.out.b", out_b);
    }
};

size_t param_count(const MeganConfig& cfg);

// ---- forward/backward ----------------------------------------------------

struct ExtractCtx {
    Tensor frame;                // input RGB
    NonLocalCtx nl;
    Tensor first_in;             // input to the first m1 conv
    std::vector<Tensor> pre;     // m1 conv outputs pre-activation
};

Tensor feature_extract(const Tensor& frame, const MeganParams& p, const MeganConfig& cfg,
                       ExtractCtx* ctx = nullptr);
void feature_extract_backward(const Tensor& dout, const ExtractCtx& ctx,
                              const MeganParams& p, const MeganConfig& cfg,
                              MeganParams& dp);

struct ReconFrameCtx {
    std::vector<ResBlockCtx> res;
    Tensor up1_in, up1_pre;  // conv input / output saved around each shuffle
    Tensor up2_in, up2_pre;
    Tensor out_in;
};

struct ReconCtx {
    std::vector<PfrdbCtx> pfrdb;
    std::vector<ReconFrameCtx> frames;
};

std::vector<Tensor> reconstruct(const std::vector<Tensor>& feats, const MeganParams& p,
                                const MeganConfig& cfg, ReconCtx* ctx = nullptr);
void reconstruct_backward(const std::vector<Tensor>& dout, const ReconCtx& ctx,
                          const MeganParams& p, const MeganConfig& cfg, MeganParams& dp,
                          std::vector<Tensor>& dfeats);

struct MeganCtx {
    std::vector<ExtractCtx> extract;   // n+1
    std::vector<InterpCtx> interp;     // n
    std::vector<Tensor> seq;           // interleaved 2n+1 feature maps
    BidirCtx bidir;
    std::vector<Tensor> lstm_out;
    LmgaCtx lmga;
    ReconCtx recon;
};

/// n+1 LR RGB frames -> 2n+1 HR RGB frames (raw, unclamped; clamping happens
/// only at image emission).
std::vector<Tensor> megan_forward(const std::vector<Tensor>& lr_frames,
                                  const MeganParams& p, const MeganConfig& cfg,
                                  uint64_t pool_seed, MeganCtx* ctx = nullptr);
void megan_backward(const std::vector<Tensor>& dout, const MeganCtx& ctx,
                    const MeganParams& p, const MeganConfig& cfg, MeganParams& dp);

// ---- checkpoints -----------------------------------------------------------
// Container: u32 entry count, then per entry u16 name length + UTF-8 name +
// MGT1 tensor blob, little-endian throughout. Besides the parameters, a few
// reserved "__meta__./__opt__." entries carry the architecture config and
// optimizer state so a checkpoint is self-describing.

struct Checkpoint {
    MeganConfig config;
    MeganParams params;
    std::vector<std::pair<std::string, Tensor>> extra;  // __opt__ entries etc.
};

void save_checkpoint(const std::string& path, const MeganConfig& cfg, MeganParams& params,
                     const std::vector<std::pair<std::string, Tensor>>& extra = {});
Checkpoint load_checkpoint(const std::string& path);

Tensor encode_config(const MeganConfig& cfg);
MeganConfig decode_config(const Tensor& t);

}  // namespace megan

#endif

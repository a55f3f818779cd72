#include <gtest/gtest.h>

#include <mutex>
#include <random>

#include <json.hpp>

#include "salient_teach/codec.hpp"
#include "salient_teach/image_io.hpp"
#include "salient_teach/protocol.hpp"
#include "salient_teach/session.hpp"

using namespace salient_teach;
using json = nlohmann::json;

namespace {

std::string png_b64(std::uint8_t r, std::uint8_t g, std::uint8_t b, std::size_t w = 32, std::size_t h = 24) {
  Frame f{w, h, std::vector<std::uint8_t>(w * h * 3)};
  for (std::size_t i = 0; i < w * h; ++i) {
    f.pixels[3 * i] = r;
    f.pixels[3 * i + 1] = g;
    f.pixels[3 * i + 2] = b;
  }
  return base64_encode(encode_png(f));
}

class Client {
 public:
  explicit Client(bool background = false, BackbonePtr backbone = make_test_backbone(42, 8, 4, 4)) {
    ConnectionOptions opts;
    opts.background_training = background;
    conn_ = std::make_unique<Connection>(std::move(backbone), [this](std::string m) {
      std::lock_guard lock(mutex_);
      messages_.push_back(json::parse(m));
    }, opts);
  }

  // Sends one message and returns everything it produced.
  std::vector<json> send(const std::string& text) {
    const std::size_t before = size();
    conn_->handle_message(text);
    conn_->wait_for_training();
    std::lock_guard lock(mutex_);
    return {messages_.begin() + static_cast<std::ptrdiff_t>(before), messages_.end()};
  }
  std::vector<json> send(const json& msg) { return send(msg.dump()); }
  json one(const json& msg) {
    auto out = send(msg);
    EXPECT_EQ(out.size(), 1u) << msg.dump();
    return out.empty() ? json() : out.front();
  }

  std::size_t size() {
    std::lock_guard lock(mutex_);
    return messages_.size();
  }
  Connection& conn() { return *conn_; }

 private:
  std::mutex mutex_;
  std::vector<json> messages_;
  std::unique_ptr<Connection> conn_;
};

void teach_two(Client& c, int per_label = 3) {
  c.one({{"type", "create_session"}, {"seed", 5}});
  c.one({{"type", "add_label"}, {"name", "red"}});
  c.one({{"type", "add_label"}, {"name", "blue"}});
  for (int i = 0; i < per_label; ++i) {
    c.one({{"type", "add_sample"}, {"label_id", 0}, {"frame", png_b64(static_cast<std::uint8_t>(200 + i), 0, 0)}});
    c.one({{"type", "add_sample"}, {"label_id", 1}, {"frame", png_b64(0, 0, static_cast<std::uint8_t>(200 + i))}});
  }
}

}  // namespace

TEST(Protocol, CreateSession) {
  Client c;
  const auto r = c.one({{"type", "create_session"}, {"seed", 9}, {"config", {{"epochs", 3}}}});
  EXPECT_EQ(r["type"], "session_created");
  EXPECT_EQ(r["labels"], json::array());
  EXPECT_EQ(r["state"], "teaching");
  EXPECT_EQ(r["seed"], 9);
  EXPECT_EQ(c.conn().state(), SessionState::teaching);
}

TEST(Protocol, NoSessionYet) {
  Client c;
  for (const char* type : {"add_label", "train", "frame", "save", "reopen"}) {
    const auto r = c.one({{"type", type}, {"name", "x"}});
    EXPECT_EQ(r["type"], "error");
    EXPECT_EQ(r["code"], "no_session") << type;
  }
}

TEST(Protocol, TeachTrainEvaluate) {
  Client c;
  teach_two(c);
  const auto r = c.one({{"type", "add_sample"}, {"label_id", 0}, {"frame", png_b64(255, 0, 0)}});
  EXPECT_EQ(r, (json{{"type", "sample_added"}, {"label_id", 0}, {"count", 4}}));

  const auto frame_early = c.one({{"type", "frame"}, {"frame", png_b64(255, 0, 0)}});
  EXPECT_EQ(frame_early["type"], "error");
  EXPECT_EQ(frame_early["code"], "wrong_state");

  const auto out = c.send(json{{"type", "train"}});
  ASSERT_EQ(out.size(), 11u);
  for (int e = 0; e < 10; ++e) {
    EXPECT_EQ(out[e]["type"], "train_progress");
    EXPECT_EQ(out[e]["epoch"], e + 1);
  }
  EXPECT_EQ(out[10]["type"], "trained");
  EXPECT_EQ(out[10]["report"]["epoch_losses"].size(), 10u);
  EXPECT_EQ(out[10]["state"], "evaluating");
  EXPECT_TRUE(out[10]["report"]["training_ms"].is_number());

  const auto p = c.one({{"type", "frame"}, {"frame", png_b64(240, 5, 5, 64, 48)}});
  EXPECT_EQ(p["type"], "prediction");
  EXPECT_EQ(p["scores"].size(), 2u);
  EXPECT_EQ(p["saliency"]["crop"], (json{{"x", 8}, {"y", 0}, {"side", 48}}));
  EXPECT_EQ(base64_decode(p["saliency"]["q8"].get<std::string>()).size(), 16u);

  const auto sel = c.one({{"type", "select_class"}, {"class_id", 1}});
  EXPECT_EQ(sel["class_id"], 1);
  EXPECT_EQ(c.one({{"type", "frame"}, {"frame", png_b64(240, 5, 5)}})["saliency_class"], 1);
  EXPECT_EQ(c.one({{"type", "frame"}, {"frame", png_b64(240, 5, 5)}, {"selected_class", 0}})["saliency_class"], 0);
  c.one({{"type", "select_class"}, {"class_id", nullptr}});
  EXPECT_EQ(c.one({{"type", "select_class"}, {"class_id", 7}})["code"], "not_found");

  // Evaluating rejects teaching mutations.
  EXPECT_EQ(c.one({{"type", "add_label"}, {"name", "green"}})["code"], "wrong_state");
  EXPECT_EQ(c.one({{"type", "add_sample"}, {"label_id", 0}, {"frame", png_b64(1, 1, 1)}})["code"], "wrong_state");

  const auto re = c.one({{"type", "reopen"}});
  EXPECT_EQ(re["type"], "reopened");
  EXPECT_EQ(re["counts"], (json{4, 3}));
  EXPECT_EQ(c.one({{"type", "frame"}, {"frame", png_b64(1, 1, 1)}})["code"], "wrong_state");
}

TEST(Protocol, TrainPreconditionError) {
  Client c;
  c.one({{"type", "create_session"}});
  c.one({{"type", "add_label"}, {"name", "solo"}});
  const auto r = c.one({{"type", "train"}});
  EXPECT_EQ(r["code"], "precondition_failed");
  c.one({{"type", "add_label"}, {"name", "empty"}});
  c.one({{"type", "add_sample"}, {"label_id", 0}, {"frame", png_b64(1, 2, 3)}});
  const auto r2 = c.one({{"type", "train"}});
  EXPECT_NE(r2["detail"].get<std::string>().find("empty"), std::string::npos);
  EXPECT_EQ(c.conn().state(), SessionState::teaching);
}

TEST(Protocol, SaveLoadRoundTrip) {
  Client c;
  teach_two(c);
  c.send(json{{"type", "train"}});
  const auto saved = c.one({{"type", "save"}});
  EXPECT_EQ(saved["type"], "saved");
  const auto blob = saved["blob"].get<std::string>();

  Client d;
  const auto loaded = d.one({{"type", "load"}, {"blob", blob}});
  EXPECT_EQ(loaded["type"], "session_loaded");
  EXPECT_EQ(loaded["state"], "evaluating");
  EXPECT_EQ(loaded["labels"][1], (json{{"id", 1}, {"name", "blue"}, {"count", 3}}));
  const auto frame = png_b64(30, 40, 220);
  const auto a = c.one({{"type", "frame"}, {"frame", frame}});
  const auto b = d.one({{"type", "frame"}, {"frame", frame}});
  EXPECT_EQ(a["scores"], b["scores"]);
  EXPECT_EQ(a["saliency"], b["saliency"]);

  Client other(false, make_test_backbone(1, 8, 4, 4));
  EXPECT_EQ(other.one({{"type", "load"}, {"blob", blob}})["code"], "compatibility");
  EXPECT_EQ(other.one({{"type", "load"}, {"blob", base64_encode(std::string_view("{\"version\":"))}})["code"],
            "parse_error");
}

TEST(Protocol, DuplicateLabelAndUnknownIds) {
  Client c;
  c.one({{"type", "create_session"}});
  c.one({{"type", "add_label"}, {"name", "hand"}});
  EXPECT_EQ(c.one({{"type", "add_label"}, {"name", "hand"}})["code"], "conflict");
  EXPECT_EQ(c.one({{"type", "add_sample"}, {"label_id", 4}, {"frame", png_b64(1, 2, 3)}})["code"], "not_found");
  EXPECT_EQ(c.one({{"type", "clear_label"}, {"label_id", 4}})["code"], "not_found");
  EXPECT_EQ(c.one({{"type", "clear_label"}, {"label_id", 0}})["type"], "label_cleared");
}

TEST(Protocol, MalformedInputGetsExactlyOneError) {
  Client c;
  c.one({{"type", "create_session"}});
  c.one({{"type", "add_label"}, {"name", "a"}});
  const std::vector<std::string> bad = {
      "",
      "{",
      "null",
      "[1,2]",
      "42",
      "{}",
      R"({"type":5})",
      R"({"type":"bogus"})",
      R"({"type":"add_label"})",
      R"({"type":"add_label","name":3})",
      R"({"type":"add_sample","label_id":"zero","frame":"AAAA"})",
      R"({"type":"add_sample","label_id":-1,"frame":"AAAA"})",
      R"({"type":"add_sample","label_id":0,"frame":"not base64!"})",
      R"({"type":"add_sample","label_id":0,"frame":"AAAA"})",
      R"({"type":"add_sample","label_id":0})",
      R"({"type":"create_session","config":{"epochs":0}})",
      R"({"type":"create_session","config":{"learning_rate":"fast"}})",
      R"({"type":"create_session","seed":-3})",
      R"({"type":"load","blob":"@@"})",
      R"({"type":"select_class"})",
      std::string("\xff\xfe\x00garbage", 10),
  };
  for (const auto& text : bad) {
    const auto out = c.send(text);
    ASSERT_EQ(out.size(), 1u) << text;
    EXPECT_EQ(out[0]["type"], "error") << text;
    EXPECT_TRUE(out[0]["code"].is_string());
    EXPECT_TRUE(out[0]["detail"].is_string());
  }
  // The connection still works afterwards.
  EXPECT_EQ(c.one({{"type", "add_label"}, {"name", "b"}})["type"], "label_added");
}

TEST(Protocol, RandomBytesNeverCrash) {
  Client c;
  c.one({{"type", "create_session"}});
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> len(0, 64), byte(0, 255);
  for (int i = 0; i < 2000; ++i) {
    std::string s(static_cast<std::size_t>(len(rng)), '\0');
    for (char& ch : s) ch = static_cast<char>(byte(rng));
    const auto out = c.send(s);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0]["type"], "error");
  }
}

TEST(Protocol, BackgroundTrainingRejectsFrames) {
  Client c(true);
  teach_two(c, 40);
  c.conn().handle_message(R"({"type":"frame","frame":"AAAA"})");
  c.conn().wait_for_training();
  c.conn().handle_message(R"({"type":"train"})");
  // While the worker runs, the connection answers with wrong_state (or the
  // worker may already be finished, in which case the frame is processed).
  c.conn().handle_message(json{{"type", "frame"}, {"frame", png_b64(200, 0, 0)}}.dump());
  c.conn().wait_for_training();
  EXPECT_EQ(c.conn().state(), SessionState::evaluating);
  const auto all = c.send(json{{"type", "save"}});
  EXPECT_EQ(all.back()["type"], "saved");
}

TEST(Protocol, CloseCancelsTraining) {
  Client c(true);
  teach_two(c, 40);
  c.conn().handle_message(R"({"type":"train"})");
  c.conn().close();
  EXPECT_NE(c.conn().state(), SessionState::training);
  const std::size_t n = c.size();
  c.conn().handle_message(R"({"type":"save"})");
  EXPECT_EQ(c.size(), n);
}

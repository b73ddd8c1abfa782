#pragma once

#include "vlmix/tensor.hpp"
#include "vlmix/ops.hpp"
#include "vlmix/rng.hpp"
#include "vlmix/binary_io.hpp"
#include "vlmix/config.hpp"
#include "vlmix/vocab.hpp"
#include "vlmix/scene.hpp"
#include "vlmix/corpus.hpp"
#include "vlmix/encoders.hpp"
#include "vlmix/objectives.hpp"
#include "vlmix/optimizer.hpp"
#include "vlmix/prompting.hpp"
#include "vlmix/generate.hpp"
#include "vlmix/retrieve.hpp"
#include "vlmix/bleu.hpp"
#include "vlmix/checkpoint.hpp"
#include "vlmix/train.hpp"
#include "vlmix/study.hpp"

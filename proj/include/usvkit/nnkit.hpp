#pragma once

#include "usvkit/nn/gradcheck.hpp"
#include "usvkit/nn/layers.hpp"
#include "usvkit/nn/loss.hpp"
#include "usvkit/nn/model.hpp"
#include "usvkit/nn/optim.hpp"
#include "usvkit/nn/serialize.hpp"
#include "usvkit/nn/tensor.hpp"
#include "usvkit/nn/train.hpp"

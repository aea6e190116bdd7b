import torch
import torch.nn as nn

from crossseg.models import ProjectionHead, register_network


class DoubleConv(nn.Sequential):
    def __init__(self, in_ch, out_ch):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )


class Down(nn.Sequential):
    def __init__(self, in_ch, out_ch):
        super().__init__(nn.MaxPool2d(2), DoubleConv(in_ch, out_ch))


class Up(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, out_ch, kernel_size=2, stride=2)
        self.conv = DoubleConv(out_ch * 2, out_ch)

    def forward(self, x, skip):
        x = self.up(x)
        return self.conv(torch.cat([skip, x], dim=1))


@register_network("cnn_unet")
class UNet(nn.Module):
    """U-Net with ``unet_depth`` pooling stages and channel doubling per stage.

    The deepest encoder feature map feeds the projection head.
    """

    def __init__(self, cfg):
        super().__init__()
        c = cfg.base_channels
        self.depth = cfg.unet_depth
        chans = [c * 2**i for i in range(self.depth + 1)]
        self.inc = DoubleConv(cfg.in_channels, chans[0])
        self.downs = nn.ModuleList(Down(chans[i], chans[i + 1]) for i in range(self.depth))
        self.ups = nn.ModuleList(Up(chans[i + 1], chans[i]) for i in reversed(range(self.depth)))
        self.outc = nn.Conv2d(chans[0], cfg.num_classes, kernel_size=1)
        self.projection = ProjectionHead(chans[-1], cfg.projection_dim)

    @property
    def size_multiple(self):
        return 2**self.depth

    def forward(self, x, with_representation=False):
        h, w = x.shape[-2:]
        m = self.size_multiple
        if h % m or w % m:
            raise ValueError(f"UNet of depth {self.depth} needs H, W divisible by {m}; got {h}x{w}")
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(skips[-1]))
        bottleneck = skips.pop()
        y = bottleneck
        for up in self.ups:
            y = up(y, skips.pop())
        logits = self.outc(y)
        z = self.projection(bottleneck.mean(dim=(2, 3))) if with_representation else None
        return logits, z

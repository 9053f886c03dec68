# Package marker